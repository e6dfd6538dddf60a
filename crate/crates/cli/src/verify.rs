//! Self-contained invariant suite behind `zstar verify`. Nothing here
//! needs a trained model or files on disk.

use serde::Serialize;

use zstar::attention::{
    addition_as_rearranged, apply_weights, mixing_as_rearranged_from_logits, rearranged_attention,
    rearranged_from_logits, self_attention, simple_addition, simple_addition_weights, style_mass,
    AttentionHook, AttentionInputs, AttentionWeights, FeatureMap, Qkv, RegionControl,
};
use zstar::denoiser::{Architecture, DenoiserModel, IMAGE_CHANNELS, IMAGE_SIZE};
use zstar::diffusion::{
    analytic_gaussian_denoiser, ddim_invert, ddim_sample, forward_diffuse, make_linear_schedule,
    ImageTensor, NoiseSchedule,
};
use zstar::numerics::{SeededRng, NEG_LARGE};

#[derive(Debug, Serialize)]
pub struct CheckRow {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn row(name: &'static str, result: zstar::Result<(bool, String)>) -> CheckRow {
    match result {
        Ok((passed, detail)) => CheckRow {
            name,
            passed,
            detail,
        },
        Err(e) => CheckRow {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Random query, one style block and one content block with every logit
/// inside `[-5, 5]` at unit scale.
fn instance(rng: &mut SeededRng, scale: f64) -> zstar::Result<AttentionInputs> {
    let d = 1 + rng.below(8);
    let (nq, ns, nc) = (1 + rng.below(16), 1 + rng.below(16), 1 + rng.below(16));
    let a = (5.0 / d as f64).sqrt();
    let mut fm = |n: usize, lo: f64, hi: f64| FeatureMap::flat(rng.uniform_matrix(n, d, lo, hi));
    let q = fm(nq, -a, a)?;
    let (ks, vs) = (fm(ns, -a, a)?, fm(ns, -1.0, 1.0)?);
    let (kc, vc) = (fm(nc, -a, a)?, fm(nc, -1.0, 1.0)?);
    let mut inputs = AttentionInputs::pair(q, ks, vs, kc, vc)?;
    inputs.dim_scale = scale;
    Ok(inputs)
}

fn max_diff(a: &FeatureMap, b: &FeatureMap) -> zstar::Result<f64> {
    a.values().max_abs_diff(b.values())
}

fn addition_identity(seed: u64, n: usize) -> zstar::Result<(bool, String)> {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let inp = instance(&mut rng, 1.0)?;
        let (a, _) = addition_as_rearranged(&inp)?;
        worst = worst.max(max_diff(&a, &simple_addition(&inp, 0.5)?)?);
    }
    Ok((
        worst <= 1e-9,
        format!("max |diff| {worst:.2e} over {n} instances"),
    ))
}

fn masked_style_is_self_attention(seed: u64, n: usize) -> zstar::Result<(bool, String)> {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let inp = instance(&mut rng, 1.0)?;
        let mut logits = inp.scaled_logits()?;
        logits.style[0] = logits.style[0].map(|_| NEG_LARGE);
        let w = rearranged_from_logits(&logits, 1.2, None)?;
        let out = apply_weights(
            &w,
            &[inp.blocks[0].values.values(), inp.blocks[1].values.values()],
        )?;
        let c = inp.content()?;
        let own = self_attention(&inp.query, &c.keys, &c.values, inp.dim_scale)?;
        worst = worst.max(out.max_abs_diff(own.values())?);
    }
    Ok((
        worst <= 1e-9,
        format!("max |diff| {worst:.2e} over {n} instances"),
    ))
}

fn low_temperature_is_argmax(seed: u64, n: usize) -> zstar::Result<(bool, String)> {
    let mut rng = SeededRng::new(seed);
    let (mut worst, mut used) = (0.0f64, 0);
    while used < n {
        let inp = instance(&mut rng, 100.0)?;
        let logits = inp.scaled_logits()?;
        let all = zstar::numerics::Matrix::hcat(&[&logits.style[0], &logits.content])?;
        let values = zstar::numerics::Matrix::vcat(&[
            inp.blocks[0].values.values(),
            inp.blocks[1].values.values(),
        ])?;
        // keep rows whose maximum is unique by a clear margin
        let argmax: Option<Vec<usize>> = (0..all.rows())
            .map(|i| {
                let row = all.row(i);
                let mut idx: Vec<usize> = (0..row.len()).collect();
                idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
                (idx.len() == 1 || row[idx[0]] - row[idx[1]] > 20.0).then_some(idx[0])
            })
            .collect();
        let Some(argmax) = argmax else { continue };
        used += 1;
        let (out, _) = rearranged_attention(&inp, 1.0, None)?;
        for (i, &j) in argmax.iter().enumerate() {
            for (a, b) in out.values().row(i).iter().zip(values.row(j)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok((
        worst <= 1e-6,
        format!("max |diff| {worst:.2e} over {n} instances"),
    ))
}

fn row_sums(w: &AttentionWeights) -> f64 {
    (0..w.matrix.rows())
        .map(|i| (w.matrix.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn row_stochastic(seed: u64, n: usize) -> zstar::Result<(bool, String)> {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let inp = instance(&mut rng, 1.0)?;
        let ns = inp.blocks[0].keys.tokens();
        let grid = inp.query.spatial();
        let half = RegionControl::right_half(grid, ns);
        let full = RegionControl::full(grid, ns, zstar::attention::ControlMode::Hard);
        let empty = RegionControl::empty(grid, ns);
        for lambda in [0.0, 1.2, 2.0] {
            for c in [None, Some(&empty), Some(&half), Some(&full)] {
                worst = worst.max(row_sums(&rearranged_attention(&inp, lambda, c)?.1));
            }
        }
        worst = worst.max(row_sums(&simple_addition_weights(&inp, 0.5)?));
        worst = worst.max(row_sums(&addition_as_rearranged(&inp)?.1));
    }
    Ok((worst <= 1e-9, format!("max |row sum - 1| {worst:.2e}")))
}

fn adaptive_mass(seed: u64) -> zstar::Result<(bool, String)> {
    let mut rng = SeededRng::new(seed);
    let inp = instance(&mut rng, 1.0)?;
    let base = inp.scaled_logits()?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let (mut masses, mut worst_fixed) = (Vec::new(), 0.0f64);
    for c in [0.0, 2.0, 4.0, 8.0] {
        let mut logits = base.clone();
        logits.style[0] = logits.style[0].map(|v| v - c);
        masses.push(mean(style_mass(&rearranged_from_logits(
            &logits, 1.0, None,
        )?)));
        let fixed = style_mass(&mixing_as_rearranged_from_logits(&logits, 0.5)?);
        worst_fixed = fixed
            .iter()
            .map(|m| (m - 0.5).abs())
            .fold(worst_fixed, f64::max);
    }
    let falling = masses.windows(2).all(|w| w[1] < w[0]);
    let ok = falling && masses[3] < 0.01 && worst_fixed <= 1e-9;
    Ok((
        ok,
        format!("rearranged mass {masses:.4?}; addition mass off by {worst_fixed:.1e}"),
    ))
}

fn ddim_round_trip(seed: u64) -> zstar::Result<(bool, String)> {
    let schedule = make_linear_schedule(100)?;
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for sigma in [0.1, 0.5] {
        let mu = ImageTensor::noise(3, 8, 8, &mut rng).map(|v| 0.3 * v);
        let model = analytic_gaussian_denoiser(mu.clone(), sigma)?;
        for _ in 0..20 {
            let x = mu.lincomb(1.0, &mu.noise_like(&mut rng), sigma)?;
            let traj = ddim_invert(&x, &schedule, &model)?;
            let back = ddim_sample(traj.x_t(), &schedule, &model, &mut zstar::attention::NoHook)?;
            worst = worst.max(back.relative_error(&x)?);
        }
    }
    Ok((
        worst <= 1e-2,
        format!("max relative L2 {worst:.2e} at T=100"),
    ))
}

fn forward_moments(seed: u64) -> zstar::Result<(bool, String)> {
    let grid = NoiseSchedule::training_grid();
    let mut rng = SeededRng::new(seed);
    let x0 = ImageTensor::filled(1, 1, 1, 0.7);
    let n = 10_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for t in [250, 500, 750] {
        let a = grid.alpha_bar(t);
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let z = x0.noise_like(&mut rng);
                forward_diffuse(&x0, t, &grid, &z).map(|x| x.data()[0])
            })
            .collect::<zstar::Result<_>>()?;
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = ((1.0 - a) / n as f64).sqrt();
        let se_var = (1.0 - a) * (2.0 / (n - 1) as f64).sqrt();
        let zm = (mean - a.sqrt() * 0.7).abs() / se_mean;
        let zv = (var - (1.0 - a)).abs() / se_var;
        ok &= zm <= 3.0 && zv <= 3.0;
        parts.push(format!("t={t}: {zm:.2}/{zv:.2} SE"));
    }
    Ok((ok, parts.join(", ")))
}

struct PassThrough;

impl AttentionHook for PassThrough {
    fn wants(&self, _: usize, _: usize) -> bool {
        true
    }

    fn attend(&mut self, _: usize, _: usize, qkv: &Qkv) -> zstar::Result<Option<FeatureMap>> {
        self_attention(&qkv.q, &qkv.k, &qkv.v, qkv.dim_scale).map(Some)
    }
}

fn capture_fidelity(seed: u64) -> zstar::Result<(bool, String)> {
    let model = DenoiserModel::new(
        Architecture {
            base_channels: 16,
            groups: 4,
        },
        seed,
    )?;
    let mut rng = SeededRng::new(seed);
    let x = ImageTensor::noise(IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE, &mut rng);
    let layers: Vec<usize> = (0..model.registry().len()).collect();
    let plain = model.predict_noise(&x, 500)?;
    let (captured, _) = model.predict_noise_with_capture(&x, 500, &layers)?;
    let passive = captured.bit_identical(&plain);
    let injected = model.predict_noise_with_injection(&x, 500, 0, &mut PassThrough)?;
    let diff = injected.max_abs_diff(&plain)?;
    Ok((
        passive && diff <= 1e-5,
        format!("capture bit-identical: {passive}; pass-through max |diff| {diff:.2e}"),
    ))
}

pub fn run_suite(seed: u64, instances: usize) -> Vec<CheckRow> {
    let n = instances.max(1);
    vec![
        row("addition identity", addition_identity(seed, n)),
        row(
            "masked style limit",
            masked_style_is_self_attention(seed + 1, n),
        ),
        row(
            "low temperature limit",
            low_temperature_is_argmax(seed + 2, n),
        ),
        row("row stochasticity", row_stochastic(seed + 3, n)),
        row("adaptive style mass", adaptive_mass(seed + 4)),
        row("ddim round trip", ddim_round_trip(seed + 5)),
        row("forward moments", forward_moments(seed + 6)),
        row("capture fidelity", capture_fidelity(seed + 7)),
    ]
}
