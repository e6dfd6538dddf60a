use super::{ImageTensor, NoisePredictor, Timestep};
use crate::attention::AttentionHook;
use crate::error::{invalid, Result};

/// Exact noise prediction for data distributed as `N(mu, sigma² I)`.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    mu: ImageTensor,
    sigma: f64,
}

pub fn analytic_gaussian_denoiser(mu: ImageTensor, sigma: f64) -> Result<GaussianDenoiser> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid!("sigma must be positive, got {sigma}"));
    }
    Ok(GaussianDenoiser { mu, sigma })
}

impl GaussianDenoiser {
    pub fn mu(&self) -> &ImageTensor {
        &self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `E[x_0 | x_t]`.
    pub fn posterior_mean(&self, x_t: &ImageTensor, alpha_bar: f64) -> Result<ImageTensor> {
        let s2 = self.sigma * self.sigma;
        let denom = alpha_bar * s2 + 1.0 - alpha_bar;
        x_t.lincomb(
            alpha_bar.sqrt() * s2 / denom,
            &self.mu,
            (1.0 - alpha_bar) / denom,
        )
    }

    pub fn eps(&self, x_t: &ImageTensor, alpha_bar: f64) -> Result<ImageTensor> {
        if alpha_bar >= 1.0 {
            return Err(invalid!("noise prediction undefined at alpha_bar = 1"));
        }
        let mean = self.posterior_mean(x_t, alpha_bar)?;
        let s = (1.0 - alpha_bar).sqrt();
        x_t.lincomb(1.0 / s, &mean, -alpha_bar.sqrt() / s)
    }
}

impl NoisePredictor for GaussianDenoiser {
    fn predict(
        &self,
        x: &ImageTensor,
        at: Timestep,
        _step: usize,
        _hook: &mut dyn AttentionHook,
    ) -> Result<ImageTensor> {
        self.eps(x, at.alpha_bar)
    }
}
