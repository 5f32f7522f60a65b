//! Latent flow model: straight-line interpolation between data (`t = 0`)
//! and Gaussian noise (`t = 1`), a learned velocity field, and samplers that
//! integrate it back to data with optional stochastic steps whose
//! transition densities are tracked for policy optimization.

pub mod kernel;
pub mod latent;
pub mod replay;
pub mod sampler;
pub mod velocity;

pub use kernel::{
    cps_predict, cps_update, kl_coefficient, kl_term, matched_cps_eta, noise_scale, ode_update, score, sde_update,
    step_coeffs, transition_logprob, KernelCoeffs, StepKernel,
};
pub use latent::{interpolate, row_mean, LatentBlock};
pub use replay::{step_logprob, step_logprob_node};
pub use sampler::{
    sample_group, sample_trajectory, DenoisingTrajectory, SamplerConfig, SamplerMode, StepRecord, WindowConfig,
};
pub use velocity::{
    cps_step, draw_fm, fm_loss, fm_loss_graph, fm_loss_with, fm_term, ode_step, sde_step, time_features, FmDraw,
    VelocityField, TIME_FEATURES,
};
