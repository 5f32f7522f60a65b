use super::config::GrpoConfig;
use super::rollout::{LatentPolicy, RolloutGroup};
use super::surrogate::{is_clipped, ratio_node, surrogate_node};
use crate::error::{Error, Result};
use crate::flowlat::{kl_coefficient, step_logprob_node, DenoisingTrajectory};
use crate::numcore::{Graph, Var};
use crate::textpol::{AnswerSample, TextPolicy};

/// How many ratios fell outside the clip range.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClipCount {
    pub clipped: usize,
    pub total: usize,
}

impl ClipCount {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.clipped as f64 / self.total as f64
        }
    }

    fn record(&mut self, ratio: f64, lo: f64, hi: f64) {
        self.total += 1;
        if is_clipped(ratio, lo, hi) {
            self.clipped += 1;
        }
    }
}

/// Frozen reference velocity for the KL term.
#[derive(Debug, Clone, Copy)]
pub struct KlReference<'r> {
    pub params: &'r [f64],
    /// Noise level `a` of the SDE the KL is measured under.
    pub noise_level: f64,
    pub t_clamp: f64,
}

/// Latent loss of one group:
/// `-(1/N) Σ_n Σ_t min(r Â_n, clip(r, 1 ± ε_z) Â_n)` over stochastic steps,
/// plus `β·KL` against the reference when one is given.
pub fn latent_group_loss(
    g: &mut Graph<'_>,
    policy: &LatentPolicy,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
    kl: Option<KlReference<'_>>,
    clips: &mut ClipCount,
) -> Result<Option<Var>> {
    let Some(adv) = &group.latent_adv else {
        return Ok(None);
    };
    let mut terms = Vec::new();
    for (traj, &a) in group.trajectories.iter().zip(adv) {
        terms.extend(trajectory_terms(g, policy, traj, a, cfg, kl, clips)?);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let total = g.add_all(&terms);
    Ok(Some(g.scale(total, -1.0 / group.trajectories.len() as f64)))
}

/// Per-step objective terms of one trajectory (KL enters with a minus sign
/// so the caller's negation turns it into a penalty).
fn trajectory_terms(
    g: &mut Graph<'_>,
    policy: &LatentPolicy,
    traj: &DenoisingTrajectory,
    adv: f64,
    cfg: &GrpoConfig,
    kl: Option<KlReference<'_>>,
    clips: &mut ClipCount,
) -> Result<Vec<Var>> {
    let use_kl = kl.filter(|_| cfg.kl_beta > 0.0);
    let mut out = Vec::new();
    for (k, step) in traj.stochastic_steps() {
        let old = step
            .logp_old
            .ok_or_else(|| Error::Data(format!("stochastic step {k} has no stored log-probability")))?;
        if adv == 0.0 && use_kl.is_none() {
            continue;
        }
        let (lp, v) = step_logprob_node(g, &policy.velocity, traj, k)?;
        let r = ratio_node(g, lp, old);
        clips.record(g.scalar(r), cfg.eps_latent, cfg.eps_latent);
        if adv != 0.0 {
            out.push(surrogate_node(g, r, adv, cfg.eps_latent, cfg.eps_latent));
        }
        if let Some(reference) = use_kl {
            let v_ref = policy.velocity.eval(reference.params, &step.state, step.t, &traj.cond)?;
            let coef = kl_coefficient(step.t, reference.noise_level, step.dt, reference.t_clamp)?;
            let vr = g.constant(v_ref);
            let d = g.sub(v, vr);
            let sq = g.sq_norm(d);
            out.push(g.scale(sq, -cfg.kl_beta * coef));
        }
    }
    Ok(out)
}

/// Sum over tokens of `min(r_j A, clip(r_j) A)` for one stored answer,
/// divided by its length when `per_token_mean` is set.
#[allow(clippy::too_many_arguments)]
pub fn answer_objective(
    g: &mut Graph<'_>,
    text: &TextPolicy,
    ctx: Var,
    answer: &AnswerSample,
    adv: f64,
    eps_low: f64,
    eps_high: f64,
    per_token_mean: bool,
    clips: &mut ClipCount,
) -> Result<Option<Var>> {
    if answer.logps.len() != answer.tokens.len() {
        return Err(Error::Data("answer is missing stored token log-probabilities".into()));
    }
    if adv == 0.0 || answer.tokens.is_empty() {
        return Ok(None);
    }
    let lps = text.sequence_logprob_nodes(g, ctx, &answer.tokens)?;
    let mut terms = Vec::with_capacity(lps.len());
    for (lp, old) in lps.into_iter().zip(&answer.logps) {
        let r = ratio_node(g, lp, *old);
        clips.record(g.scalar(r), eps_low, eps_high);
        terms.push(surrogate_node(g, r, adv, eps_low, eps_high));
    }
    let sum = g.add_all(&terms);
    Ok(Some(if per_token_mean {
        g.scale(sum, 1.0 / answer.tokens.len() as f64)
    } else {
        sum
    }))
}

/// Text loss of one group:
/// `-(1/(NM)) Σ_{n,m,j} min(r Â_{n,m}, clip(r, 1-ε_l, 1+ε_h) Â_{n,m})`.
pub fn text_group_loss(
    g: &mut Graph<'_>,
    policy: &LatentPolicy,
    group: &RolloutGroup,
    cfg: &GrpoConfig,
    clips: &mut ClipCount,
) -> Result<Option<Var>> {
    let Some(text) = &policy.text else {
        return Ok(None);
    };
    let count: usize = group.answers.iter().map(Vec::len).sum();
    if count == 0 {
        return Ok(None);
    }
    let mut terms = Vec::new();
    for ((traj, answers), advs) in group.trajectories.iter().zip(&group.answers).zip(&group.text_adv) {
        if advs.iter().all(|a| *a == 0.0) {
            continue;
        }
        let z = g.constant(traj.final_state.clone());
        let ctx = text.context_node(g, &group.question.features, Some(z))?;
        for (answer, &a) in answers.iter().zip(advs) {
            if let Some(t) = answer_objective(
                g,
                text,
                ctx,
                answer,
                a,
                cfg.eps_text_low,
                cfg.eps_text_high,
                cfg.per_token_mean,
                clips,
            )? {
                terms.push(t);
            }
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let total = g.add_all(&terms);
    Ok(Some(g.scale(total, -1.0 / count as f64)))
}

/// Graph nodes for the batch-mean latent and text losses.
pub struct PolicyLosses {
    pub latent: Var,
    pub text: Var,
    pub latent_clips: ClipCount,
    pub text_clips: ClipCount,
}

/// Both losses averaged over the question groups of a batch.
pub fn policy_losses(
    g: &mut Graph<'_>,
    policy: &LatentPolicy,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
    kl: Option<KlReference<'_>>,
) -> Result<PolicyLosses> {
    let mut latent_clips = ClipCount::default();
    let mut text_clips = ClipCount::default();
    let mut lat = Vec::new();
    let mut txt = Vec::new();
    for group in groups {
        if let Some(l) = latent_group_loss(g, policy, group, cfg, kl, &mut latent_clips)? {
            lat.push(l);
        }
        if let Some(l) = text_group_loss(g, policy, group, cfg, &mut text_clips)? {
            txt.push(l);
        }
    }
    let scale = 1.0 / groups.len().max(1) as f64;
    let mean = |g: &mut Graph<'_>, parts: Vec<Var>| {
        if parts.is_empty() {
            g.constant_scalar(0.0)
        } else {
            let s = g.add_all(&parts);
            g.scale(s, scale)
        }
    };
    let latent = mean(g, lat);
    let text = mean(g, txt);
    Ok(PolicyLosses {
        latent,
        text,
        latent_clips,
        text_clips,
    })
}

/// `w_lat·L_latent + w_text·L_text` as a node.
pub fn joint_loss_node(g: &mut Graph<'_>, losses: &PolicyLosses, cfg: &GrpoConfig) -> Var {
    let a = g.scale(losses.latent, cfg.w_latent);
    let b = g.scale(losses.text, cfg.w_text);
    g.add(a, b)
}
