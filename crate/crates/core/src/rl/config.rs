use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Group sizes, clip ranges, loss weights and the KL switch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    /// Latent trajectories per question.
    pub n: usize,
    /// Answers decoded per trajectory.
    pub m: usize,
    pub eps_latent: f64,
    pub eps_text_low: f64,
    pub eps_text_high: f64,
    pub w_latent: f64,
    pub w_text: f64,
    /// KL weight against the frozen start-of-RL velocity; 0 disables it.
    pub kl_beta: f64,
    pub std_floor: f64,
    /// Divide each answer's token sum by its length before averaging.
    /// With plain sums the on-policy loss is not zero once answer lengths
    /// differ within a row.
    pub per_token_mean: bool,
    /// Gradient updates per rollout batch. 1 keeps training on-policy.
    #[serde(default = "one")]
    pub update_epochs: usize,
}

fn one() -> usize {
    1
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            n: 16,
            m: 5,
            eps_latent: 1e-5,
            eps_text_low: 0.2,
            eps_text_high: 0.28,
            w_latent: 10.0,
            w_text: 1.0,
            kl_beta: 0.0,
            std_floor: 1e-8,
            per_token_mean: true,
            update_epochs: 1,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.m < 2 {
            return config_err(format!("group sizes must be at least 2, got N={} M={}", self.n, self.m));
        }
        for (name, v) in [
            ("eps_latent", self.eps_latent),
            ("eps_text_low", self.eps_text_low),
            ("eps_text_high", self.eps_text_high),
            ("std_floor", self.std_floor),
        ] {
            if !(v > 0.0) {
                return config_err(format!("{name} must be positive"));
            }
        }
        if self.eps_text_low >= 1.0 || self.eps_latent >= 1.0 {
            return config_err("lower clip bound must stay above zero");
        }
        if !(self.w_latent >= 0.0 && self.w_text >= 0.0 && self.kl_beta >= 0.0) {
            return config_err("loss weights and the KL coefficient must be non-negative");
        }
        if self.update_epochs == 0 {
            return config_err("update_epochs must be at least 1");
        }
        Ok(())
    }
}
