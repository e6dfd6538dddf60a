use super::*;
use crate::attention::NoHook;
use crate::data::{DatasetSpec, Family};
use crate::denoiser::{Architecture, DenoiserModel};
use crate::diffusion::{ddim_invert, ddim_sample, make_linear_schedule, ImageTensor};

fn model() -> DenoiserModel {
    DenoiserModel::new(
        Architecture {
            base_channels: 8,
            groups: 4,
        },
        11,
    )
    .unwrap()
}

fn image(family: Family, i: usize) -> ImageTensor {
    DatasetSpec {
        count: 8,
        seed: 5,
        resolution: 32,
    }
    .image(family, i)
}

fn small_config(mode: FusionMode) -> InjectionConfig {
    InjectionConfig {
        mode,
        steps: 6,
        window: (1, 6),
        ..InjectionConfig::default()
    }
}

#[test]
fn mode_none_is_the_plain_reconstruction() {
    let m = model();
    let c = image(Family::Content, 0);
    let s = image(Family::Style, 0);
    let res = dual_path_transfer(&c, &[s], &m, &small_config(FusionMode::None)).unwrap();
    let schedule = make_linear_schedule(6).unwrap();
    let traj = ddim_invert(&c, &schedule, &m).unwrap();
    let plain = ddim_sample(traj.x_t(), &schedule, &m, &mut NoHook).unwrap();
    assert!(res.image.bit_identical(&plain));
    assert!(res.diagnostics.is_empty());
}

#[test]
fn transfer_is_deterministic_and_lockstep() {
    let m = model();
    let c = image(Family::Content, 1);
    let s = image(Family::Style, 1);
    let cfg = small_config(FusionMode::Rearranged);
    let a = dual_path_transfer(&c, std::slice::from_ref(&s), &m, &cfg).unwrap();
    let b = dual_path_transfer(&c, &[s], &m, &cfg).unwrap();
    assert!(a.image.bit_identical(&b.image));
    assert_eq!(a.diagnostics.len(), 5 * cfg.layers.len());
    for d in &a.diagnostics {
        assert_eq!(d.style_step, d.step);
        assert!((1..6).contains(&d.step));
        assert!(d.mean_style_mass > 0.0 && d.mean_style_mass < 1.0);
    }
}

#[test]
fn every_mode_changes_the_output() {
    let m = model();
    let c = image(Family::Content, 2);
    let s = image(Family::Style, 2);
    let session = TransferSession::new(&m, &c, &[s], 6, &[4, 5]).unwrap();
    let base = session.reconstruction().unwrap().clone();
    for mode in [
        FusionMode::NaiveCross,
        FusionMode::SimpleAddition,
        FusionMode::Rearranged,
    ] {
        let out = session.run(&small_config(mode)).unwrap();
        assert!(out.image.max_abs_diff(&base).unwrap() > 1e-6, "{mode:?}");
    }
    let naive = session.run(&small_config(FusionMode::NaiveCross)).unwrap();
    assert!(naive.diagnostics.iter().all(|d| d.mean_style_mass == 1.0));
    let add = session
        .run(&small_config(FusionMode::SimpleAddition))
        .unwrap();
    assert!(add
        .diagnostics
        .iter()
        .all(|d| (d.mean_style_mass - 0.5).abs() < 1e-12));
}

#[test]
fn duplicated_style_matches_a_single_style() {
    let m = model();
    let c = image(Family::Content, 3);
    let s = image(Family::Style, 3);
    let cfg = small_config(FusionMode::Rearranged);
    let one = dual_path_transfer(&c, std::slice::from_ref(&s), &m, &cfg).unwrap();
    let two = dual_path_transfer(&c, &[s.clone(), s], &m, &cfg).unwrap();
    let diff = one.image.max_abs_diff(&two.image).unwrap();
    assert!(diff <= 1e-5, "{diff}");
}

#[test]
fn region_limits() {
    let m = model();
    let c = image(Family::Content, 4);
    let s = image(Family::Style, 4);
    let session = TransferSession::new(&m, &c, &[s], 6, &[4, 5]).unwrap();
    let plain = session.run(&small_config(FusionMode::Rearranged)).unwrap();
    let with = |shape| InjectionConfig {
        region: Some(RegionSpec::hard(shape)),
        ..small_config(FusionMode::Rearranged)
    };

    let full = session.run(&with(RegionShape::Full)).unwrap();
    assert!(full.image.bit_identical(&plain.image));

    let empty = session.run(&with(RegionShape::Empty)).unwrap();
    let recon = session.reconstruction().unwrap();
    let diff = empty.image.max_abs_diff(recon).unwrap();
    assert!(diff <= 1e-5, "{diff}");
    assert!(empty.diagnostics.iter().all(|d| d.mean_style_mass == 0.0));

    let right = session.run(&with(RegionShape::RightHalf)).unwrap();
    for d in &right.diagnostics {
        let half = d.grid.1 / 2;
        let r = d.mean_mass_where(|col| col >= half);
        let l = d.mean_mass_where(|col| col < half);
        assert!(r > l, "step {} layer {}: {r} vs {l}", d.step, d.layer);
        assert_eq!(l, 0.0);
    }
}

#[test]
fn regional_transfer_requires_a_region() {
    let m = model();
    let c = image(Family::Content, 0);
    let s = image(Family::Style, 0);
    assert!(regional_transfer(&c, &s, &m, &small_config(FusionMode::Rearranged)).is_err());
}

#[test]
fn trajectory_content_source_runs() {
    let m = model();
    let c = image(Family::Content, 5);
    let s = image(Family::Style, 5);
    let session = TransferSession::new(&m, &c, &[s], 6, &[4, 5]).unwrap();
    let running = session.run(&small_config(FusionMode::Rearranged)).unwrap();
    let traj = session
        .run(&InjectionConfig {
            content_source: ContentSource::Trajectory,
            ..small_config(FusionMode::Rearranged)
        })
        .unwrap();
    assert!(traj.image.is_finite());
    assert!(!traj.image.bit_identical(&running.image));
}

#[test]
fn bad_inputs_are_rejected() {
    let m = model();
    let c = image(Family::Content, 0);
    let s = image(Family::Style, 0);
    let cfg = small_config(FusionMode::Rearranged);
    assert!(dual_path_transfer(&c, &[], &m, &cfg).is_err());
    let small = ImageTensor::zeros(3, 16, 16);
    assert!(dual_path_transfer(&small, std::slice::from_ref(&s), &m, &cfg).is_err());
    let bright = c.map(|v| v * 2.0);
    assert!(dual_path_transfer(&bright, std::slice::from_ref(&s), &m, &cfg).is_err());
    let session = TransferSession::new(&m, &c, &[s], 6, &[5]).unwrap();
    assert!(session.run(&cfg).is_err(), "layer 4 was not captured");
    assert!(session
        .run(&InjectionConfig {
            steps: 10,
            window: (1, 10),
            ..cfg
        })
        .is_err());
}

#[test]
fn results_are_written_with_weight_dumps() {
    let m = model();
    let c = image(Family::Content, 6);
    let s = image(Family::Style, 6);
    let cfg = InjectionConfig {
        dump_weights: true,
        layers: vec![5],
        window: (4, 6),
        ..small_config(FusionMode::Rearranged)
    };
    let res = dual_path_transfer(&c, &[s], &m, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    res.write(dir.path()).unwrap();
    assert!(dir.path().join("stylized.png").exists());
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("diagnostics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(json["config"]["mode"], "rearranged");
    let dumps = std::fs::read_dir(dir.path().join("weights"))
        .unwrap()
        .count();
    assert_eq!(dumps, 2);
    let w = crate::numerics::tensor_file::TensorFile::read(
        &dir.path().join("weights/step04_layer5.zstr"),
    )
    .unwrap();
    // 256 query tokens over 256 style plus 256 content keys
    assert_eq!(w.dims, vec![256, 512]);
}

#[test]
fn grid_parsing() {
    assert_eq!(
        AblationAxis::parse("lambda=0,0.6,1.2").unwrap(),
        AblationAxis::Lambda(vec![0.0, 0.6, 1.2])
    );
    assert_eq!(
        AblationAxis::parse("layers=4+5,3+4+5").unwrap(),
        AblationAxis::Layers(vec![vec![4, 5], vec![3, 4, 5]])
    );
    assert_eq!(
        AblationAxis::parse("window=0:30,5:30").unwrap(),
        AblationAxis::Window(vec![(0, 30), (5, 30)])
    );
    assert_eq!(
        AblationAxis::parse("mode=naive_cross,rearranged").unwrap(),
        AblationAxis::Mode(vec![FusionMode::NaiveCross, FusionMode::Rearranged])
    );
    for bad in [
        "lambda",
        "lambda=",
        "lambda=x",
        "speed=1",
        "window=5",
        "mode=fast",
    ] {
        assert!(AblationAxis::parse(bad).is_err(), "{bad}");
    }
}

#[test]
fn grid_is_a_cartesian_product() {
    let base = InjectionConfig::default();
    let cells = expand_grid(
        &base,
        &[
            AblationAxis::Lambda(vec![0.0, 1.0]),
            AblationAxis::Start(vec![0, 5, 10]),
        ],
    )
    .unwrap();
    assert_eq!(cells.len(), 6);
    assert_eq!(cells[1].lambda_style, 0.0);
    assert_eq!(cells[1].window, (5, 30));
    assert_eq!(cells[5].lambda_style, 1.0);
    assert_eq!(cells[5].window, (10, 30));
    assert!(expand_grid(&base, &[]).is_err());
    assert!(expand_grid(&base, &[AblationAxis::Mix(vec![])]).is_err());
}

#[test]
fn sweep_records_failures_and_round_trips_csv() {
    let m = model();
    let c = image(Family::Content, 7);
    let s = image(Family::Style, 7);
    let dir = tempfile::tempdir().unwrap();
    let base = small_config(FusionMode::Rearranged);
    let table = ablation_sweep(
        &m,
        &c,
        &s,
        &base,
        &[AblationAxis::Start(vec![0, 3, 9])],
        Some(dir.path()),
    )
    .unwrap();
    assert_eq!(table.rows.len(), 3);
    assert_eq!(table.failures(), 1);
    assert!(table.rows[2].error.is_some());
    assert!(table.rows[0].image.as_ref().unwrap().exists());
    let back = AblationTable::read_csv(&dir.path().join(ABLATION_CSV)).unwrap();
    assert_eq!(back.rows.len(), 3);
    for (a, b) in table.rows.iter().zip(&back.rows) {
        assert_eq!(a.config.window, b.config.window);
        assert_eq!(a.error, b.error);
        let (ma, mb) = (a.metrics.as_ref(), b.metrics.as_ref());
        assert_eq!(
            ma.map(|m| m.content_preservation),
            mb.map(|m| m.content_preservation)
        );
        assert_eq!(a.mean_style_mass, b.mean_style_mass);
    }
}
