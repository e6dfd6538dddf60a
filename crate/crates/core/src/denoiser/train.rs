use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::tape::Tape;
use super::unet::{IMAGE_CHANNELS, IMAGE_SIZE};
use super::{DenoiserModel, Tensor};
use crate::diffusion::{ImageTensor, NoiseSchedule, TRAIN_STEPS};
use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::SeededRng;

/// Optimiser and schedule settings for [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub ema_decay: f64,
    /// EMA decay ramps as `min(ema_decay, (1+k)/(ema_warmup+k))` over
    /// optimiser steps `k`; 0 disables the ramp.
    pub ema_warmup: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            ema_decay: 0.999,
            ema_warmup: 10,
            grad_clip: 1.0,
            seed: 0,
            dataset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid!("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning rate {} must be > 0", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid!("{name} = {b} outside [0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(invalid!("ema_decay {} outside [0, 1]", self.ema_decay));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err(invalid!("grad_clip {} must be >= 0", self.grad_clip));
        }
        Ok(())
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Exponential moving average of the weights; the model to sample with.
    pub ema: DenoiserModel,
    /// Raw optimiser weights after the final step.
    pub raw: DenoiserModel,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss of every optimiser step.
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    /// True when the second half of the epochs has a lower mean loss than
    /// the first half.
    pub fn loss_trends_down(&self) -> bool {
        let n = self.epoch_losses.len();
        if n < 2 {
            return true;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        mean(&self.epoch_losses[n / 2..]) < mean(&self.epoch_losses[..n / 2])
    }
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
}

impl Adam {
    fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = cfg.learning_rate as f32;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
            }
        }
    }
}

fn check_dataset(dataset: &[ImageTensor]) -> Result<()> {
    if dataset.is_empty() {
        return Err(invalid!("training dataset is empty"));
    }
    for (i, img) in dataset.iter().enumerate() {
        if img.shape() != (IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE) {
            return Err(shape_err!("training image {i} has shape {:?}", img.shape()));
        }
    }
    Ok(())
}

/// A noised minibatch: inputs, timesteps and target noise.
struct Batch {
    x: Tensor,
    t: Vec<f32>,
    eps: Vec<f32>,
}

fn make_batch(
    dataset: &[ImageTensor],
    indices: &[usize],
    grid: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Batch {
    let n = indices.len();
    let per = IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
    let mut x = Vec::with_capacity(n * per);
    let mut eps = Vec::with_capacity(n * per);
    let mut t = Vec::with_capacity(n);
    for &i in indices {
        let tau = 1 + rng.below(TRAIN_STEPS);
        let a = grid.alpha_bar(tau);
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        for &x0 in dataset[i].data() {
            let z = rng.normal();
            x.push((sa * x0 + sb * z) as f32);
            eps.push(z as f32);
        }
        t.push(tau as f32);
    }
    Batch {
        x: Tensor::new(vec![n, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], x).expect("batch shape"),
        t,
        eps,
    }
}

/// Mean-squared ε error of one batch, and its parameter gradients.
fn loss_and_grads(model: &DenoiserModel, batch: Batch) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new(model.params());
    let out = model.forward_batch(&mut tape, batch.x, &batch.t)?;
    let pred = tape.value(out);
    let n = batch.eps.len() as f32;
    let mut loss = 0.0f64;
    let mut g = Tensor::zeros(pred.shape());
    for ((gv, &p), &e) in g.data_mut().iter_mut().zip(pred.data()).zip(&batch.eps) {
        let d = p - e;
        loss += (d as f64) * (d as f64);
        *gv = 2.0 * d / n;
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Ok((loss, Vec::new()));
    }
    Ok((loss, tape.backward(out, g)))
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads
            .iter_mut()
            .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
}

/// Trains `model` on ε-prediction MSE with `t` uniform on the training grid.
///
/// Each epoch visits a fresh shuffle of `dataset`; the final partial batch
/// is kept. All randomness comes from `config.seed`, and the computation is
/// single-threaded, so two runs with the same inputs are bit-identical.
pub fn train(
    model: DenoiserModel,
    config: &TrainConfig,
    dataset: &[ImageTensor],
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(dataset)?;
    let grid = NoiseSchedule::training_grid();
    let mut rng = SeededRng::new(config.seed);
    let mut raw = model;
    let mut ema = raw.clone();
    let mut adam = Adam::new(raw.params());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch = make_batch(dataset, chunk, &grid, &mut rng);
            let (loss, mut grads) = loss_and_grads(&raw, batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {loss} at epoch {epoch}, step {} (lr {})",
                    step_losses.len(),
                    config.learning_rate
                )));
            }
            clip(&mut grads, config.grad_clip);
            adam.update(raw.params_mut(), &grads, config);

            let k = step_losses.len() as f64;
            let decay = if config.ema_warmup > 0 {
                config
                    .ema_decay
                    .min((1.0 + k) / (config.ema_warmup as f64 + k))
            } else {
                config.ema_decay
            } as f32;
            for (e, p) in ema.params_mut().iter_mut().zip(raw.params()) {
                for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
                    *ev = decay * *ev + (1.0 - decay) * pv;
                }
            }
            step_losses.push(loss);
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::info!("epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome {
        ema,
        raw,
        epoch_losses,
        step_losses,
    })
}

/// Mean ε-MSE over `draws` noised copies of each image, with timesteps
/// stratified evenly over the grid.
pub fn validation_loss(
    model: &DenoiserModel,
    images: &[ImageTensor],
    draws: usize,
    seed: u64,
) -> Result<f64> {
    check_dataset(images)?;
    if draws == 0 {
        return Err(invalid!("draws must be positive"));
    }
    let grid = NoiseSchedule::training_grid();
    let mut rng = SeededRng::new(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for img in images {
        for d in 0..draws {
            let tau = 1
                + ((d as f64 + rng.uniform()) / draws as f64 * TRAIN_STEPS as f64)
                    .floor()
                    .min(TRAIN_STEPS as f64 - 1.0) as usize;
            let z = img.noise_like(&mut rng);
            let a = grid.alpha_bar(tau);
            let xt = img.lincomb(a.sqrt(), &z, (1.0 - a).sqrt())?;
            let pred = model.predict_noise(&xt, tau)?;
            total += pred.distance(&z)?.powi(2) / z.len() as f64;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
pub(crate) fn loss_for_tests(
    model: &DenoiserModel,
    x: Tensor,
    t: Vec<f32>,
    eps: Vec<f32>,
) -> (f64, Vec<Tensor>) {
    loss_and_grads(model, Batch { x, t, eps }).unwrap()
}
