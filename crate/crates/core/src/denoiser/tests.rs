use std::collections::BTreeMap;

use super::train::loss_for_tests;
use super::*;
use crate::attention::{self_attention, AttentionHook, FeatureMap, Qkv};
use crate::diffusion::ImageTensor;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

fn tiny() -> DenoiserModel {
    DenoiserModel::new(
        Architecture {
            base_channels: 4,
            groups: 2,
        },
        7,
    )
    .unwrap()
}

fn small() -> DenoiserModel {
    DenoiserModel::new(
        Architecture {
            base_channels: 8,
            groups: 4,
        },
        11,
    )
    .unwrap()
}

fn noise_image(seed: u64) -> ImageTensor {
    ImageTensor::noise(3, 32, 32, &mut SeededRng::new(seed))
}

fn dataset(n: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| {
            let (a, b) = (rng.uniform_in(-0.8, 0.8), rng.uniform_in(-0.8, 0.8));
            let mut img = ImageTensor::zeros(3, 32, 32);
            for c in 0..3 {
                for y in 0..32 {
                    for x in 0..32 {
                        img.set(c, y, x, if x < 16 { a } else { b });
                    }
                }
            }
            img
        })
        .collect()
}

/// Recomputes self-attention from the projections it is given.
struct Recompute;

impl AttentionHook for Recompute {
    fn wants(&self, _: usize, _: usize) -> bool {
        true
    }

    fn attend(&mut self, _: usize, _: usize, qkv: &Qkv) -> Result<Option<FeatureMap>> {
        self_attention(&qkv.q, &qkv.k, &qkv.v, qkv.dim_scale).map(Some)
    }
}

/// Replaces one layer's output with a constant, recording what it saw at
/// every other layer.
struct Override {
    layer: usize,
    value: f64,
    shape_delta: usize,
    seen: BTreeMap<usize, Qkv>,
}

impl AttentionHook for Override {
    fn wants(&self, _: usize, _: usize) -> bool {
        true
    }

    fn attend(&mut self, _: usize, layer: usize, qkv: &Qkv) -> Result<Option<FeatureMap>> {
        self.seen.insert(layer, qkv.clone());
        if layer != self.layer {
            return Ok(None);
        }
        let m = Matrix::filled(
            qkv.q.tokens(),
            qkv.q.channels() + self.shape_delta,
            self.value,
        );
        Ok(Some(FeatureMap::flat(m)?))
    }
}

#[test]
fn registry_follows_execution_order() {
    let m = build_toy_unet(0);
    let reg = m.registry();
    assert_eq!(reg.len(), 6);
    let stages: Vec<Stage> = reg.iter().map(|r| r.stage).collect();
    use Stage::*;
    assert_eq!(
        stages,
        [Encoder, Encoder, Bottleneck, Decoder, Decoder, Decoder]
    );
    let res: Vec<usize> = reg.iter().map(|r| r.resolution).collect();
    assert_eq!(res, [16, 8, 8, 8, 16, 16]);
    assert!(reg.iter().enumerate().all(|(i, r)| r.index == i));
    assert_eq!(reg[4].tokens(), 256);
}

#[test]
fn same_seed_same_parameters() {
    let (a, b, c) = (
        tiny(),
        tiny(),
        DenoiserModel::new(tiny().architecture(), 8).unwrap(),
    );
    assert_eq!(a.params(), b.params());
    assert_ne!(a.weights_hash(), c.weights_hash());
    assert_eq!(a.arch_hash(), c.arch_hash());
    assert_ne!(a.arch_hash(), small().arch_hash());
    assert!(a.params().iter().all(Tensor::is_finite));
}

#[test]
fn prediction_shape_determinism_and_time_dependence() {
    let m = small();
    let x = noise_image(1);
    let e1 = m.predict_noise(&x, 100).unwrap();
    assert_eq!(e1.shape(), (3, 32, 32));
    assert!(e1.bit_identical(&m.predict_noise(&x, 100).unwrap()));
    let e9 = m.predict_noise(&x, 900).unwrap();
    assert!(e1.distance(&e9).unwrap() > 1e-3);
}

#[test]
fn prediction_rejects_bad_inputs() {
    let m = tiny();
    assert!(matches!(
        m.predict_noise(&ImageTensor::zeros(3, 16, 16), 10),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        m.predict_noise(&noise_image(0), 1001),
        Err(Error::InvalidArgument(_))
    ));
    assert!(m
        .predict_noise_with_capture(&noise_image(0), 5, &[6])
        .is_err());
}

#[test]
fn capture_is_passive_and_faithful() {
    let m = small();
    let x = noise_image(2);
    let plain = m.predict_noise(&x, 400).unwrap();
    let (eps, caps) = m
        .predict_noise_with_capture(&x, 400, &[0, 1, 2, 3, 4, 5])
        .unwrap();
    assert!(plain.bit_identical(&eps));
    assert_eq!(caps.len(), 6);
    let dec16 = &caps[&4];
    assert_eq!(dec16.qkv.q.tokens(), 256);
    assert_eq!(dec16.qkv.q.channels(), 16);
    assert_eq!(dec16.qkv.q.spatial(), (16, 16));
    for cap in caps.values() {
        let q = &cap.qkv;
        let again = self_attention(&q.q, &q.k, &q.v, q.dim_scale).unwrap();
        let diff = again.values().max_abs_diff(cap.output.values()).unwrap();
        assert!(diff <= 1e-5, "fidelity {diff}");
    }
}

#[test]
fn pass_through_injection_matches_plain() {
    let m = small();
    let x = noise_image(3);
    let plain = m.predict_noise(&x, 700).unwrap();
    let injected = m
        .predict_noise_with_injection(&x, 700, 0, &mut Recompute)
        .unwrap();
    assert!(plain.max_abs_diff(&injected).unwrap() <= 1e-5);
}

#[test]
fn injection_reaches_the_graph_and_is_local() {
    let m = small();
    let x = noise_image(4);
    let plain = m.predict_noise(&x, 300).unwrap();
    let (_, caps) = m
        .predict_noise_with_capture(&x, 300, &[0, 1, 2, 3, 4, 5])
        .unwrap();
    let mut hook = Override {
        layer: 3,
        value: 0.0,
        shape_delta: 0,
        seen: BTreeMap::new(),
    };
    let out = m
        .predict_noise_with_injection(&x, 300, 0, &mut hook)
        .unwrap();
    assert!(plain.distance(&out).unwrap() > 1e-6);
    for layer in 0..=3 {
        let (a, b) = (&hook.seen[&layer], &caps[&layer].qkv);
        assert_eq!(a.q, b.q);
        assert_eq!(a.k, b.k);
        assert_eq!(a.v, b.v);
    }
    assert_ne!(hook.seen[&4].q, caps[&4].qkv.q);
}

#[test]
fn wrong_override_shape_names_the_layer() {
    let m = tiny();
    let mut hook = Override {
        layer: 4,
        value: 0.0,
        shape_delta: 1,
        seen: BTreeMap::new(),
    };
    let err = m
        .predict_noise_with_injection(&noise_image(5), 10, 7, &mut hook)
        .unwrap_err();
    assert!(matches!(
        err,
        Error::AtLayer {
            step: 7,
            layer: 4,
            ..
        }
    ));
}

/// Central-difference check of the analytic gradient along one random
/// direction per parameter tensor.
#[test]
fn gradients_match_finite_differences() {
    let model = tiny();
    let mut rng = SeededRng::new(9);
    let n = 2;
    let x: Vec<f32> = (0..n * 3 * 32 * 32).map(|_| rng.normal() as f32).collect();
    let eps: Vec<f32> = (0..x.len()).map(|_| rng.normal() as f32).collect();
    let x = Tensor::new(vec![n, 3, 32, 32], x).unwrap();
    let t = vec![37.0, 810.0];
    let (_, grads) = loss_for_tests(&model, x.clone(), t.clone(), eps.clone());

    let h = 1e-2f32;
    let mut worst = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        let mut dir: Vec<f32> = (0..g.len()).map(|_| rng.normal() as f32).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f32>().sqrt();
        dir.iter_mut().for_each(|d| *d /= norm);
        let analytic: f64 = g.data().iter().zip(&dir).map(|(a, b)| (a * b) as f64).sum();
        let shifted = |sign: f32| {
            let mut m = model.clone();
            for (p, d) in m.params_mut()[i].data_mut().iter_mut().zip(&dir) {
                *p += sign * h * d;
            }
            loss_for_tests(&m, x.clone(), t.clone(), eps.clone()).0
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h as f64);
        let err = (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-3);
        worst = worst.max(err);
        assert!(
            err < 2e-2,
            "{}: analytic {analytic}, numeric {numeric}",
            model.param_names().nth(i).unwrap()
        );
    }
    eprintln!("worst relative gradient error {worst:.2e}");
    assert!(worst < 2e-2);
}

#[test]
fn training_is_deterministic_and_rejects_empty_data() {
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        learning_rate: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    let data = dataset(5, 1);
    let a = train(tiny(), &cfg, &data).unwrap();
    let b = train(tiny(), &cfg, &data).unwrap();
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.ema.weights_hash(), b.ema.weights_hash());
    assert_eq!(a.step_losses.len(), 4);
    assert!(matches!(
        train(tiny(), &cfg, &[]),
        Err(Error::InvalidArgument(_))
    ));
    let bad = TrainConfig {
        learning_rate: 0.0,
        ..cfg
    };
    assert!(train(tiny(), &bad, &data).is_err());
}

#[test]
fn divergent_training_aborts_with_diagnostics() {
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        learning_rate: 1e30,
        grad_clip: 0.0,
        ..TrainConfig::default()
    };
    let data = dataset(8, 2);
    match train(tiny(), &cfg, &data) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch 0")),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}
