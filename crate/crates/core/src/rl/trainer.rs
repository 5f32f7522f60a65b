use rand::Rng;
use serde::{Deserialize, Serialize};

use super::advantages::population_std;
use super::config::GrpoConfig;
use super::loss::{joint_loss_node, policy_losses, KlReference};
use super::rollout::{collect_rollouts, LatentPolicy, RolloutGroup};
use crate::envs::{Condition, EnvSpec};
use crate::error::{Error, Result};
use crate::flowlat::SamplerConfig;
use crate::guidance::GuidanceConfig;
use crate::numcore::{adamw_step_ranges, grad, AdamState, AdamWConfig, ParamVector};
use crate::textpol::{mean_token_entropy, SamplingOptions};

/// One line of the training log. The same schema serves both policy kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    /// `"ladi"` or `"ar"`.
    pub policy: String,
    pub mean_reward: f64,
    /// Mean over questions of the within-group population std of rewards.
    pub reward_std: f64,
    pub latent_loss: f64,
    pub text_loss: f64,
    /// Mean per-token entropy of the sampled answers (0 without text).
    pub text_entropy: f64,
    pub latent_clip_frac: f64,
    pub text_clip_frac: f64,
    /// The update was dropped because the loss or gradient was not finite.
    pub skipped: bool,
}

impl MetricsRecord {
    pub const FIELDS: [&'static str; 10] = [
        "step",
        "policy",
        "mean_reward",
        "reward_std",
        "latent_loss",
        "text_loss",
        "text_entropy",
        "latent_clip_frac",
        "text_clip_frac",
        "skipped",
    ];
}

/// Mutable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct RlState {
    pub params: ParamVector,
    pub adam: AdamState,
    pub step: u64,
    /// Frozen copy of the parameters at RL start, kept only when the KL
    /// term is on.
    pub reference: Option<Vec<f64>>,
}

/// Fixed configuration of a latent-policy RL run.
#[derive(Debug, Clone, PartialEq)]
pub struct RlTrainer {
    pub policy: LatentPolicy,
    pub env: EnvSpec,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
    pub grpo: GrpoConfig,
    pub sampling: SamplingOptions,
    pub optim: AdamWConfig,
}

impl RlTrainer {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.sampler.validate()?;
        self.grpo.validate()?;
        self.sampling.validate()?;
        if self.grpo.kl_beta > 0.0 && !(self.sampler.noise_level > 0.0) {
            return Err(Error::Config("the KL term needs a positive noise level".into()));
        }
        Ok(())
    }

    pub fn start(&self, params: ParamVector, adam: AdamState) -> RlState {
        let reference = (self.grpo.kl_beta > 0.0).then(|| params.values.clone());
        RlState {
            params,
            adam,
            step: 0,
            reference,
        }
    }

    pub fn collect<R: Rng + ?Sized>(
        &self,
        params: &[f64],
        questions: &[Condition],
        rng: &mut R,
    ) -> Result<Vec<RolloutGroup>> {
        questions
            .iter()
            .map(|q| {
                collect_rollouts(
                    &self.policy,
                    params,
                    &self.env,
                    q,
                    &self.sampler,
                    Some(&self.guidance),
                    &self.grpo,
                    &self.sampling,
                    rng,
                )
            })
            .collect()
    }

    /// Collect, score, and apply `update_epochs` AdamW updates to the
    /// velocity and text slices.
    pub fn train_step<R: Rng + ?Sized>(
        &self,
        state: &mut RlState,
        questions: &[Condition],
        rng: &mut R,
    ) -> Result<MetricsRecord> {
        if questions.is_empty() {
            return Err(Error::Config("a training step needs at least one question".into()));
        }
        let groups = self.collect(&state.params.values, questions, rng)?;
        let rewards: Vec<f64> = groups.iter().flat_map(|g| g.all_rewards()).collect();
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len().max(1) as f64;
        let reward_std = groups
            .iter()
            .map(|g| population_std(&g.all_rewards().collect::<Vec<_>>()))
            .sum::<f64>()
            / groups.len() as f64;
        let text_entropy = mean_token_entropy(groups.iter().flat_map(|g| g.answers.iter().flatten()));
        let ranges = self.policy.trainable_ranges();
        let reference = state.reference.clone();
        let kl = reference.as_deref().map(|p| KlReference {
            params: p,
            noise_level: self.sampler.noise_level,
            t_clamp: self.sampler.t_clamp,
        });

        let mut record = MetricsRecord {
            step: state.step,
            policy: "ladi".into(),
            mean_reward,
            reward_std,
            latent_loss: 0.0,
            text_loss: 0.0,
            text_entropy,
            latent_clip_frac: 0.0,
            text_clip_frac: 0.0,
            skipped: false,
        };
        for _ in 0..self.grpo.update_epochs {
            let mut seen = None;
            let out = grad(&state.params.values, |g| {
                let l = policy_losses(g, &self.policy, &groups, &self.grpo, kl)?;
                seen = Some((g.scalar(l.latent), g.scalar(l.text), l.latent_clips, l.text_clips));
                Ok(joint_loss_node(g, &l, &self.grpo))
            });
            if let Some((ll, tl, lc, tc)) = seen {
                record.latent_loss = ll;
                record.text_loss = tl;
                record.latent_clip_frac = lc.fraction();
                record.text_clip_frac = tc.fraction();
            }
            let (loss, grads) = match out {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    record.skipped = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                record.skipped = true;
                break;
            }
            match adamw_step_ranges(&mut state.params.values, &grads, &mut state.adam, &self.optim, &ranges) {
                Ok(()) => {}
                Err(Error::Numeric(_)) => {
                    record.skipped = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        state.step += 1;
        Ok(record)
    }
}
