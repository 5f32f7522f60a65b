//! Token-level GRPO on a question-only autoregressive policy: the baseline
//! whose entropy and pass@k at large k are compared against the latent
//! policy. It shares the advantage, surrogate, optimizer and metrics code of
//! [`crate::rl`].

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Condition, EnvSpec};
use crate::error::{config_err, Error, Result};
use crate::numcore::{adamw_step, grad, AdamState, AdamWConfig, Graph, ParamLayout, ParamVector, Var};
use crate::reasoner::TraceExample;
use crate::rl::{answer_objective, group_advantages, population_std, ClipCount, MetricsRecord, RlState};
use crate::textpol::{mean_token_entropy, AnswerSample, LatentPool, SamplingOptions, TextPolicy};

/// A [`TextPolicy`] without a latent input, owning its parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArPolicy {
    pub text: TextPolicy,
    pub layout: ParamLayout,
}

impl ArPolicy {
    pub fn new(cond_dim: usize, embed: usize, hidden: usize, max_len: usize) -> Result<Self> {
        if embed == 0 || hidden == 0 || max_len == 0 {
            return config_err("policy sizes must be positive");
        }
        let text = TextPolicy::new(cond_dim, 0, 0, LatentPool::None, embed, hidden, max_len, 0);
        let mut layout = ParamLayout::new();
        layout.reserve("ar", text.param_count());
        Ok(Self { text, layout })
    }

    /// Random tables with the read-out layer scaled by `out_scale`; 0 gives
    /// the uniform next-token distribution.
    pub fn init_params<R: Rng + ?Sized>(&self, out_scale: f64, rng: &mut R) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout.clone());
        self.text.init(&mut p.values, out_scale, rng);
        p
    }
}

/// Group-size and clip settings of the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArConfig {
    pub group_size: usize,
    /// Symmetric clip range.
    pub eps: f64,
    pub std_floor: f64,
    pub per_token_mean: bool,
}

impl Default for ArConfig {
    /// G = N·M = 80 to match the latent pipeline's samples per question.
    fn default() -> Self {
        Self {
            group_size: 80,
            eps: 0.2,
            std_floor: 1e-8,
            per_token_mean: true,
        }
    }
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return config_err("group size must be at least 2");
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return config_err("clip range must lie in (0, 1)");
        }
        if !(self.std_floor > 0.0) {
            return config_err("std floor must be positive");
        }
        Ok(())
    }
}

/// `group` independent answers to `question`, scored by `env`.
pub fn ar_rollout<R: Rng + ?Sized>(
    policy: &ArPolicy,
    params: &[f64],
    env: &EnvSpec,
    question: &Condition,
    group: usize,
    opts: &SamplingOptions,
    rng: &mut R,
) -> Result<Vec<AnswerSample>> {
    if group < 2 {
        return config_err("group size must be at least 2");
    }
    (0..group)
        .map(|_| {
            let mut a = policy.text.sample_answer(params, &question.features, None, opts, rng)?;
            let r = env.answer_reward(&a.tokens, question);
            a.reward = if r.is_finite() { r.clamp(0.0, 1.0) } else { 0.0 };
            Ok(a)
        })
        .collect()
}

/// `-(1/G) Σ_g Σ_j min(r Â_g, clip(r, 1 ± ε) Â_g)` for one question.
pub fn ar_group_loss(
    g: &mut Graph<'_>,
    policy: &ArPolicy,
    question: &Condition,
    answers: &[AnswerSample],
    cfg: &ArConfig,
    clips: &mut ClipCount,
) -> Result<Var> {
    let rewards: Vec<f64> = answers.iter().map(|a| a.reward).collect();
    let adv = group_advantages(&rewards, cfg.std_floor)?;
    let ctx = policy.text.context_node(g, &question.features, None)?;
    let mut terms = Vec::new();
    for (a, &adv) in answers.iter().zip(&adv) {
        if let Some(t) = answer_objective(g, &policy.text, ctx, a, adv, cfg.eps, cfg.eps, cfg.per_token_mean, clips)? {
            terms.push(t);
        }
    }
    if terms.is_empty() {
        return Ok(g.constant_scalar(0.0));
    }
    let total = g.add_all(&terms);
    Ok(g.scale(total, -1.0 / answers.len() as f64))
}

/// Fixed configuration of a baseline run.
#[derive(Debug, Clone, PartialEq)]
pub struct ArTrainer {
    pub policy: ArPolicy,
    pub env: EnvSpec,
    pub config: ArConfig,
    pub sampling: SamplingOptions,
    pub optim: AdamWConfig,
}

impl ArTrainer {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.config.validate()?;
        self.sampling.validate()
    }

    pub fn start(&self, params: ParamVector, adam: AdamState) -> RlState {
        RlState {
            params,
            adam,
            step: 0,
            reference: None,
        }
    }

    /// Rollout, one clipped-surrogate update, metrics tagged `"ar"`.
    pub fn train_step<R: Rng + ?Sized>(
        &self,
        state: &mut RlState,
        questions: &[Condition],
        rng: &mut R,
    ) -> Result<MetricsRecord> {
        if questions.is_empty() {
            return config_err("a training step needs at least one question");
        }
        let groups: Vec<Vec<AnswerSample>> = questions
            .iter()
            .map(|q| ar_rollout(&self.policy, &state.params.values, &self.env, q, self.config.group_size, &self.sampling, rng))
            .collect::<Result<_>>()?;
        let all: Vec<f64> = groups.iter().flatten().map(|a| a.reward).collect();
        let mean_reward = all.iter().sum::<f64>() / all.len() as f64;
        let reward_std = groups
            .iter()
            .map(|g| population_std(&g.iter().map(|a| a.reward).collect::<Vec<_>>()))
            .sum::<f64>()
            / groups.len() as f64;
        let mut record = MetricsRecord {
            step: state.step,
            policy: "ar".into(),
            mean_reward,
            reward_std,
            latent_loss: 0.0,
            text_loss: 0.0,
            text_entropy: mean_token_entropy(groups.iter().flatten()),
            latent_clip_frac: 0.0,
            text_clip_frac: 0.0,
            skipped: false,
        };
        let mut clips = ClipCount::default();
        let out = grad(&state.params.values, |g| {
            let mut parts = Vec::with_capacity(questions.len());
            for (q, answers) in questions.iter().zip(&groups) {
                parts.push(ar_group_loss(g, &self.policy, q, answers, &self.config, &mut clips)?);
            }
            let s = g.add_all(&parts);
            Ok(g.scale(s, 1.0 / questions.len() as f64))
        });
        record.text_clip_frac = clips.fraction();
        state.step += 1;
        let (loss, grads) = match out {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                record.skipped = true;
                return Ok(record);
            }
            Err(e) => return Err(e),
        };
        record.text_loss = loss;
        if !loss.is_finite() {
            record.skipped = true;
            return Ok(record);
        }
        match adamw_step(&mut state.params.values, &grads, &mut state.adam, &self.optim) {
            Ok(()) => {}
            Err(Error::Numeric(_)) => record.skipped = true,
            Err(e) => return Err(e),
        }
        Ok(record)
    }
}

/// The entropy column of a metrics log, in step order.
pub fn entropy_series(log: &[MetricsRecord]) -> Vec<f64> {
    log.iter().map(|r| r.text_entropy).collect()
}

/// Mean answer cross-entropy of the baseline on `batch`.
pub fn ar_ce_node(g: &mut Graph<'_>, policy: &ArPolicy, batch: &[TraceExample]) -> Result<Var> {
    if batch.is_empty() {
        return config_err("supervised batch is empty");
    }
    let mut lps = Vec::new();
    for ex in batch {
        let ctx = policy.text.context_node(g, &ex.question.features, None)?;
        lps.extend(policy.text.sequence_logprob_nodes(g, ctx, &ex.answer)?);
    }
    let s = g.add_all(&lps);
    Ok(g.scale(s, -1.0 / lps.len().max(1) as f64))
}

/// Supervised warm start on question → answer pairs; calls `log(epoch, ce)`.
#[allow(clippy::too_many_arguments)]
pub fn train_ar_sft<R: Rng + ?Sized>(
    policy: &ArPolicy,
    params: &mut ParamVector,
    adam: &mut AdamState,
    corpus: &[TraceExample],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
    mut log: impl FnMut(usize, f64),
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Data("supervised corpus is empty".into()));
    }
    if batch_size == 0 {
        return config_err("batch size must be positive");
    }
    let opt = AdamWConfig {
        lr,
        ..AdamWConfig::default()
    };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        let (mut acc, mut n) = (0.0, 0usize);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<TraceExample> = chunk.iter().map(|i| corpus[*i].clone()).collect();
            let (ce, grads) = grad(&params.values, |g| ar_ce_node(g, policy, &batch))?;
            adamw_step(&mut params.values, &grads, adam, &opt)?;
            acc += ce;
            n += 1;
        }
        log(epoch, acc / n as f64);
    }
    Ok(())
}
