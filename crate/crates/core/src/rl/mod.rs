//! Group-relative policy optimization of the latent flow policy and the
//! text decoder.
//!
//! For every question N latent trajectories are sampled together under
//! repulsive guidance, M answers are decoded from each final latent, and
//! the rewards give two kinds of advantage: the standardized row means
//! drive the latent policy through the recorded stochastic denoising
//! steps, while each row standardized on its own drives the text policy.

mod advantages;
mod config;
mod loss;
mod rollout;
mod surrogate;
mod trainer;

pub use advantages::{group_advantages, latent_advantages, population_std, row_mean, text_local_advantages};
pub use config::GrpoConfig;
pub use loss::{
    answer_objective, joint_loss_node, latent_group_loss, policy_losses, text_group_loss, ClipCount, KlReference,
    PolicyLosses,
};
pub use rollout::{collect_rollouts, LatentPolicy, RolloutGroup};
pub use surrogate::{balance_alpha, clipped_surrogate, is_clipped, joint_loss, ratio_node, surrogate_node};
pub use trainer::{MetricsRecord, RlState, RlTrainer};

#[cfg(test)]
mod tests;
