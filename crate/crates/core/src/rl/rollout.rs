use rand::Rng;

use super::advantages::{latent_advantages, text_local_advantages};
use super::config::GrpoConfig;
use crate::envs::{Condition, EnvSpec, TaskKind};
use crate::error::Result;
use crate::flowlat::{sample_group, DenoisingTrajectory, SamplerConfig, VelocityField};
use crate::guidance::GuidanceConfig;
use crate::reasoner::LatentReasoner;
use crate::textpol::{AnswerSample, SamplingOptions, TextPolicy};

/// The trainable parts seen by the RL engine. `text` is absent when the
/// environment scores the latent directly.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPolicy {
    pub velocity: VelocityField,
    pub text: Option<TextPolicy>,
}

impl LatentPolicy {
    pub fn latent_only(velocity: VelocityField) -> Self {
        Self { velocity, text: None }
    }

    pub fn trainable_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut r = vec![self.velocity.range()];
        if let Some(t) = &self.text {
            r.push(t.range());
        }
        r
    }
}

impl From<&LatentReasoner> for LatentPolicy {
    fn from(m: &LatentReasoner) -> Self {
        Self {
            velocity: m.velocity.clone(),
            text: Some(m.text.clone()),
        }
    }
}

/// Everything sampled for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub question: Condition,
    pub window_start: Option<usize>,
    pub trajectories: Vec<DenoisingTrajectory>,
    /// `answers[n]` holds the M answers decoded from trajectory `n`; empty
    /// for latent-scored tasks.
    pub answers: Vec<Vec<AnswerSample>>,
    /// `rewards[n][m]`; for latent-scored tasks a single entry per row.
    pub rewards: Vec<Vec<f64>>,
    pub row_means: Vec<f64>,
    /// `None` when the group has a single trajectory.
    pub latent_adv: Option<Vec<f64>>,
    pub text_adv: Vec<Vec<f64>>,
}

impl RolloutGroup {
    pub fn latent_skipped(&self) -> bool {
        self.latent_adv.is_none()
    }

    pub fn all_rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.rewards.iter().flatten().copied()
    }
}

fn sanitize(r: f64) -> f64 {
    if r.is_finite() {
        r.clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Samples N guided trajectories for `question`, decodes M answers from
/// each final latent and fills in rewards and both advantage tensors.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts<R: Rng + ?Sized>(
    policy: &LatentPolicy,
    params: &[f64],
    env: &EnvSpec,
    question: &Condition,
    sampler: &SamplerConfig,
    guidance: Option<&GuidanceConfig>,
    grpo: &GrpoConfig,
    opts: &SamplingOptions,
    rng: &mut R,
) -> Result<RolloutGroup> {
    let window_start = sampler.draw_window_start(rng);
    let trajectories = sample_group(
        &policy.velocity,
        params,
        question.id,
        &question.features,
        sampler,
        guidance,
        grpo.n,
        window_start,
        rng,
    )?;
    let mut answers = Vec::with_capacity(trajectories.len());
    let mut rewards = Vec::with_capacity(trajectories.len());
    match (env.kind(), &policy.text) {
        (TaskKind::Mixture, _) | (_, None) => {
            for tr in &trajectories {
                answers.push(Vec::new());
                rewards.push(vec![sanitize(env.point_reward(&tr.final_state))]);
            }
        }
        (TaskKind::Modsum, Some(text)) => {
            for tr in &trajectories {
                let mut row = Vec::with_capacity(grpo.m);
                let mut rs = Vec::with_capacity(grpo.m);
                for _ in 0..grpo.m {
                    let mut a = text.sample_answer(params, &question.features, Some(&tr.final_state), opts, rng)?;
                    a.reward = sanitize(env.answer_reward(&a.tokens, question));
                    rs.push(a.reward);
                    row.push(a);
                }
                answers.push(row);
                rewards.push(rs);
            }
        }
    }
    let row_means = rewards.iter().map(|r| super::advantages::row_mean(r)).collect();
    let latent_adv = if trajectories.len() >= 2 {
        Some(latent_advantages(&rewards, grpo.std_floor)?)
    } else {
        None
    };
    let text_adv = if answers.iter().all(|a| a.len() >= 2) && !answers.is_empty() {
        text_local_advantages(&rewards, grpo.std_floor)?
    } else {
        vec![Vec::new(); trajectories.len()]
    };
    Ok(RolloutGroup {
        question: question.clone(),
        window_start,
        trajectories,
        answers,
        rewards,
        row_means,
        latent_adv,
        text_adv,
    })
}
