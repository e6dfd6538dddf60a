use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

/// Length of the training timestep grid.
pub const TRAIN_STEPS: usize = 1000;

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;

/// Cumulative signal rates `ᾱ` at `T + 1` timesteps, index 0 the clean end.
///
/// `timesteps[k]` is the position of step `k` on the training grid, where
/// grid step `τ` has `ᾱ(τ) = Π_{i=1..τ} (1 - β_i)` and `ᾱ(0) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    timesteps: Vec<usize>,
    alpha_bar: Vec<f64>,
}

/// `ᾱ(τ)` for `τ = 0..=TRAIN_STEPS` with betas linearly spaced on
/// `[1e-4, 0.02]`.
fn linear_grid() -> Vec<f64> {
    let mut out = Vec::with_capacity(TRAIN_STEPS + 1);
    let mut acc = 1.0;
    out.push(acc);
    for i in 0..TRAIN_STEPS {
        let beta = BETA_START + (BETA_END - BETA_START) * i as f64 / (TRAIN_STEPS - 1) as f64;
        acc *= 1.0 - beta;
        out.push(acc);
    }
    out
}

/// Linear-β schedule subsampled to `steps` DDIM steps at a uniform stride.
pub fn make_linear_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(invalid!("a schedule needs at least 2 steps, got {steps}"));
    }
    if steps > TRAIN_STEPS {
        return Err(invalid!(
            "{steps} steps exceed the {TRAIN_STEPS}-step training grid"
        ));
    }
    let grid = linear_grid();
    let stride = TRAIN_STEPS / steps;
    let timesteps: Vec<usize> = (0..=steps).map(|k| k * stride).collect();
    let alpha_bar = timesteps.iter().map(|&t| grid[t]).collect();
    NoiseSchedule::from_parts(timesteps, alpha_bar)
}

impl NoiseSchedule {
    /// Checks that `ᾱ` is in `(0, 1]` and strictly decreasing.
    pub fn from_parts(timesteps: Vec<usize>, alpha_bar: Vec<f64>) -> Result<Self> {
        if timesteps.len() != alpha_bar.len() || alpha_bar.is_empty() {
            return Err(invalid!(
                "{} timesteps for {} signal rates",
                timesteps.len(),
                alpha_bar.len()
            ));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(invalid!("signal rates must lie in (0, 1]"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid!("signal rates must strictly decrease"));
        }
        Ok(Self {
            timesteps,
            alpha_bar,
        })
    }

    /// The full training grid, one schedule step per grid step.
    pub fn training_grid() -> Self {
        make_linear_schedule(TRAIN_STEPS).expect("grid schedule is valid")
    }

    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn timestep(&self, t: usize) -> usize {
        self.timesteps[t]
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn check_index(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(invalid!("timestep index {t} outside 0..={}", self.steps()));
        }
        Ok(())
    }

    /// Short content hash used in manifests.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (&t, &a) in self.timesteps.iter().zip(&self.alpha_bar) {
            h.update((t as u64).to_le_bytes());
            h.update(a.to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
