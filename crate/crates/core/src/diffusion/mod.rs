//! Noise schedules, the forward noising process, deterministic DDIM
//! stepping in both directions and a closed-form Gaussian denoiser used as
//! an exact oracle.

mod ddim;
mod gaussian;
mod image;
mod schedule;

pub use ddim::{
    ddim_invert, ddim_invert_refined, ddim_sample, ddim_sample_trajectory, ddim_step,
    ddim_transfer, forward_diffuse, NoisePredictor, Provenance, Timestep, Trajectory,
    INVERSION_REFINEMENTS,
};
pub use gaussian::{analytic_gaussian_denoiser, GaussianDenoiser};
pub use image::ImageTensor;
pub use schedule::{make_linear_schedule, NoiseSchedule, TRAIN_STEPS};
