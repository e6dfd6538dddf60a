use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ImageTensor, NoiseSchedule};
use crate::attention::{AttentionHook, NoHook};
use crate::error::{invalid, Error, Result};
use crate::numerics::tensor_file::{TensorData, TensorFile};

/// Where a step sits: its schedule index, training-grid timestep and `ᾱ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timestep {
    pub index: usize,
    pub grid: usize,
    pub alpha_bar: f64,
}

impl Timestep {
    pub fn of(schedule: &NoiseSchedule, index: usize) -> Self {
        Self {
            index,
            grid: schedule.timestep(index),
            alpha_bar: schedule.alpha_bar(index),
        }
    }
}

/// A noise-prediction model `ε(x_t, t)`.
///
/// `step` is the denoising step counter of the calling sampler and is only
/// forwarded to `hook`; models without attention layers ignore both.
pub trait NoisePredictor {
    fn predict(
        &self,
        x: &ImageTensor,
        at: Timestep,
        step: usize,
        hook: &mut dyn AttentionHook,
    ) -> Result<ImageTensor>;

    fn predict_plain(&self, x: &ImageTensor, at: Timestep) -> Result<ImageTensor> {
        self.predict(x, at, 0, &mut NoHook)
    }
}

/// `√ᾱ_t·x0 + √(1-ᾱ_t)·z`.
pub fn forward_diffuse(
    x0: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    z: &ImageTensor,
) -> Result<ImageTensor> {
    schedule.check_index(t)?;
    let a = schedule.alpha_bar(t);
    x0.lincomb(a.sqrt(), z, (1.0 - a).sqrt())
}

/// Deterministic DDIM move of `x` from index `from` to index `to` given the
/// noise estimate `eps`. Works in either direction.
pub fn ddim_transfer(
    x: &ImageTensor,
    eps: &ImageTensor,
    from: usize,
    to: usize,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_index(from)?;
    schedule.check_index(to)?;
    let a_from = schedule.alpha_bar(from);
    let a_to = schedule.alpha_bar(to);
    let x0 = x.lincomb(
        1.0 / a_from.sqrt(),
        eps,
        -(1.0 - a_from).sqrt() / a_from.sqrt(),
    )?;
    x0.lincomb(a_to.sqrt(), eps, (1.0 - a_to).sqrt())
}

/// One denoising step `t → t_prev` with `η = 0`.
pub fn ddim_step(
    x_t: &ImageTensor,
    eps_pred: &ImageTensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    if t <= t_prev {
        return Err(invalid!("ddim_step needs t > t_prev, got {t} -> {t_prev}"));
    }
    ddim_transfer(x_t, eps_pred, t, t_prev, schedule)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Inversion,
    Sampling,
}

/// Latents `x_0 … x_T` aligned with a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub latents: Vec<ImageTensor>,
    pub schedule: NoiseSchedule,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryManifest {
    steps: usize,
    schedule_hash: String,
    provenance: Provenance,
    schedule: NoiseSchedule,
}

impl Trajectory {
    pub fn x0(&self) -> &ImageTensor {
        &self.latents[0]
    }

    pub fn x_t(&self) -> &ImageTensor {
        self.latents.last().expect("trajectories are nonempty")
    }

    /// Writes `latents.zstr` (`[T+1, C, H, W]`, f64) and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (c, h, w) = self.latents[0].shape();
        let data: Vec<f64> = self
            .latents
            .iter()
            .flat_map(|x| x.data().to_vec())
            .collect();
        TensorFile::new(vec![self.latents.len(), c, h, w], TensorData::F64(data))?
            .write(&dir.join("latents.zstr"))?;
        let manifest = TrajectoryManifest {
            steps: self.schedule.steps(),
            schedule_hash: self.schedule.hash(),
            provenance: self.provenance,
            schedule: self.schedule.clone(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: TrajectoryManifest = serde_json::from_slice(&bytes)?;
        if manifest.schedule.hash() != manifest.schedule_hash {
            return Err(invalid!("trajectory manifest schedule hash mismatch"));
        }
        let file = TensorFile::read(&dir.join("latents.zstr"))?;
        let [n, c, h, w] = file.dims[..] else {
            return Err(invalid!("trajectory tensor must be rank 4"));
        };
        if n != manifest.steps + 1 {
            return Err(invalid!("{n} latents for {} steps", manifest.steps));
        }
        let data = file.data.to_f64();
        let latents = data
            .chunks_exact(c * h * w)
            .map(|chunk| ImageTensor::new(c, h, w, chunk.to_vec()))
            .collect::<Result<_>>()?;
        Ok(Self {
            latents,
            schedule: manifest.schedule,
            provenance: manifest.provenance,
        })
    }
}

/// Fixed-point refinements per inversion step used by [`ddim_invert`].
pub const INVERSION_REFINEMENTS: usize = 2;

/// DDIM inversion of `x_0` up to `x_T` with [`INVERSION_REFINEMENTS`]
/// fixed-point refinements per step.
pub fn ddim_invert(
    x0: &ImageTensor,
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
) -> Result<Trajectory> {
    ddim_invert_refined(x0, schedule, model, INVERSION_REFINEMENTS)
}

/// DDIM inversion. Each step starts from the usual approximation
/// `ε(x_{t-1}, t)` and then re-solves `x_t = step⁻¹(x_{t-1}, ε(x_t, t))`
/// by fixed-point iteration, so that the sampler's step from `x_t` lands
/// back on `x_{t-1}`. `refinements = 0` is plain DDIM inversion.
pub fn ddim_invert_refined(
    x0: &ImageTensor,
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    refinements: usize,
) -> Result<Trajectory> {
    let mut latents = Vec::with_capacity(schedule.steps() + 1);
    latents.push(x0.clone());
    for t in 1..=schedule.steps() {
        let at = Timestep::of(schedule, t);
        let x = latents.last().expect("nonempty");
        let eps = model.predict_plain(x, at)?;
        let mut next = ddim_transfer(x, &eps, t - 1, t, schedule)?;
        for _ in 0..refinements {
            let eps = model.predict_plain(&next, at)?;
            next = ddim_transfer(x, &eps, t - 1, t, schedule)?;
        }
        latents.push(next);
    }
    Ok(Trajectory {
        latents,
        schedule: schedule.clone(),
        provenance: Provenance::Inversion,
    })
}

/// Deterministic sampling from `x_T`, keeping every latent. Step `k`
/// (0-based) moves from index `T - k` to `T - k - 1` and is what `hook`
/// sees as its step number.
pub fn ddim_sample_trajectory(
    x_t: &ImageTensor,
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    hook: &mut dyn AttentionHook,
) -> Result<Trajectory> {
    let steps = schedule.steps();
    let mut latents = vec![x_t.clone()];
    for k in 0..steps {
        let t = steps - k;
        let x = latents.last().expect("nonempty");
        let eps = model.predict(x, Timestep::of(schedule, t), k, hook)?;
        let next = ddim_step(x, &eps, t, t - 1, schedule)?;
        latents.push(next);
    }
    latents.reverse();
    Ok(Trajectory {
        latents,
        schedule: schedule.clone(),
        provenance: Provenance::Sampling,
    })
}

pub fn ddim_sample(
    x_t: &ImageTensor,
    schedule: &NoiseSchedule,
    model: &dyn NoisePredictor,
    hook: &mut dyn AttentionHook,
) -> Result<ImageTensor> {
    let steps = schedule.steps();
    let mut x = x_t.clone();
    for k in 0..steps {
        let t = steps - k;
        let eps = model.predict(&x, Timestep::of(schedule, t), k, hook)?;
        x = ddim_step(&x, &eps, t, t - 1, schedule)?;
    }
    Ok(x)
}
