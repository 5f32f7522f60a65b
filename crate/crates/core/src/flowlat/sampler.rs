use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernel::{self, step_coeffs, KernelCoeffs, StepKernel};
use super::velocity::VelocityField;
use crate::error::{config_err, Error, Result};
use crate::guidance::{group_offsets, GuidanceConfig};
use crate::numcore::{normal_vec, read_container, write_container, ContainerHeader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Ode,
    Sde,
    Cps,
}

/// Contiguous run of stochastic steps. The start index is drawn uniformly
/// from `range.0..range.1` once per rollout batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub size: usize,
    pub range: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Denoising steps `K`; step `k` moves from `t = 1 - k/K` to `t - 1/K`.
    pub steps: usize,
    pub t_clamp: f64,
    pub mode: SamplerMode,
    /// Noise level `a` of the SDE schedule.
    pub noise_level: f64,
    /// CPS strength. `None` picks the value whose step std matches the SDE
    /// std at `t = 0.5`.
    pub cps_eta: Option<f64>,
    pub window: Option<WindowConfig>,
    /// Use the normalized Gaussian log-density instead of `-‖x - μ‖²`.
    pub full_logprob: bool,
    /// Classifier-free guidance. Unsupported; must stay `false`.
    pub cfg: bool,
}

impl SamplerConfig {
    /// Rollout sampler: 10 steps, CPS, stochastic window of 2 in `[0, 5)`.
    pub fn train_default() -> Self {
        Self {
            steps: 10,
            t_clamp: 1e-3,
            mode: SamplerMode::Cps,
            noise_level: 0.8,
            cps_eta: None,
            window: Some(WindowConfig {
                size: 2,
                range: (0, 5),
            }),
            full_logprob: false,
            cfg: false,
        }
    }

    /// Evaluation sampler: the full 30-step deterministic schedule.
    pub fn eval_default() -> Self {
        Self {
            steps: 30,
            mode: SamplerMode::Ode,
            window: None,
            ..Self::train_default()
        }
    }

    pub fn ode(steps: usize) -> Self {
        Self {
            steps,
            mode: SamplerMode::Ode,
            window: None,
            ..Self::train_default()
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return config_err("sampler needs at least one step");
        }
        if self.cfg {
            return Err(Error::Capability("classifier-free guidance is not supported".into()));
        }
        if !(self.t_clamp > 0.0 && self.t_clamp < 0.5) {
            return config_err("t_clamp must lie in (0, 0.5)");
        }
        if !(self.noise_level >= 0.0) {
            return config_err("noise level must be non-negative");
        }
        if let Some(eta) = self.cps_eta {
            if !(0.0..=1.0).contains(&eta) {
                return config_err("cps_eta must lie in [0, 1]");
            }
        }
        if let Some(w) = self.window {
            if w.size == 0 || w.size > self.steps {
                return config_err(format!("window size {} outside 1..={}", w.size, self.steps));
            }
            if w.range.0 >= w.range.1 || w.range.1 > self.steps || w.range.0 + w.size > self.steps {
                return config_err(format!(
                    "window range {:?} invalid for {} steps with size {}",
                    w.range, self.steps, w.size
                ));
            }
        }
        Ok(())
    }

    /// Kernel used on stochastic steps.
    pub fn stochastic_kernel(&self) -> StepKernel {
        match self.mode {
            SamplerMode::Ode => StepKernel::Ode,
            SamplerMode::Sde => StepKernel::Sde { a: self.noise_level },
            SamplerMode::Cps => StepKernel::Cps {
                eta: self
                    .cps_eta
                    .unwrap_or_else(|| kernel::matched_cps_eta(self.noise_level, self.dt(), self.t_clamp)),
            },
        }
    }

    /// Draws the window start for one rollout batch.
    pub fn draw_window_start<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        self.window.map(|w| {
            let hi = w.range.1.min(self.steps + 1 - w.size);
            rng.random_range(w.range.0..hi.max(w.range.0 + 1))
        })
    }

    /// Whether step `k` uses the stochastic kernel.
    pub fn in_window(&self, k: usize, window_start: Option<usize>) -> bool {
        if self.mode == SamplerMode::Ode {
            return false;
        }
        match (self.window, window_start) {
            (Some(w), Some(s)) => k >= s && k < s + w.size,
            (Some(_), None) => false,
            (None, _) => true,
        }
    }
}

/// One denoising transition `x_t → x_{t - dt}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub dt: f64,
    pub state: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: f64,
    pub x_coef: f64,
    pub v_coef: f64,
    pub stochastic: bool,
    pub offset: Vec<f64>,
    pub logp_old: Option<f64>,
}

/// A full denoising run from noise to `final_state`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisingTrajectory {
    pub rows: usize,
    pub cols: usize,
    pub cond_id: usize,
    pub cond: Vec<f64>,
    pub full_logprob: bool,
    pub steps: Vec<StepRecord>,
    pub final_state: Vec<f64>,
}

impl DenoisingTrajectory {
    /// State reached by step `k`.
    pub fn next_state(&self, k: usize) -> &[f64] {
        self.steps
            .get(k + 1)
            .map(|s| s.state.as_slice())
            .unwrap_or(&self.final_state)
    }

    pub fn stochastic_steps(&self) -> impl Iterator<Item = (usize, &StepRecord)> {
        self.steps.iter().enumerate().filter(|(_, s)| s.stochastic)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let meta = serde_json::json!({
            "rows": self.rows,
            "cols": self.cols,
            "cond_id": self.cond_id,
            "full_logprob": self.full_logprob,
            "stochastic": self.steps.iter().map(|s| s.stochastic).collect::<Vec<_>>(),
        });
        let mut sections: Vec<(String, Vec<f64>)> = vec![("cond".into(), self.cond.clone())];
        let scalars: Vec<f64> = self
            .steps
            .iter()
            .flat_map(|s| [s.t, s.dt, s.std, s.x_coef, s.v_coef, s.logp_old.unwrap_or(0.0)])
            .collect();
        sections.push(("scalars".into(), scalars));
        for (k, s) in self.steps.iter().enumerate() {
            sections.push((format!("state{k}"), s.state.clone()));
            sections.push((format!("mean{k}"), s.mean.clone()));
            sections.push((format!("offset{k}"), s.offset.clone()));
        }
        sections.push(("final".into(), self.final_state.clone()));
        let header = ContainerHeader {
            kind: "trajectory".into(),
            sections: sections.iter().map(|(n, _)| n.clone()).collect(),
            meta,
        };
        let payload: Vec<&[f64]> = sections.iter().map(|(_, v)| v.as_slice()).collect();
        write_container(w, &header, &payload)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (header, sections) = read_container(r)?;
        if header.kind != "trajectory" {
            return Err(Error::Format(format!("expected a trajectory, found `{}`", header.kind)));
        }
        let field = |k: &str| {
            header
                .meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("trajectory header lacks `{k}`")))
        };
        let rows: usize = serde_json::from_value(field("rows")?)?;
        let cols: usize = serde_json::from_value(field("cols")?)?;
        let cond_id: usize = serde_json::from_value(field("cond_id")?)?;
        let full_logprob: bool = serde_json::from_value(field("full_logprob")?)?;
        let flags: Vec<bool> = serde_json::from_value(field("stochastic")?)?;
        let k = flags.len();
        if sections.len() != 3 + 3 * k || sections[1].len() != 6 * k {
            return Err(Error::Format("trajectory sections do not match its step count".into()));
        }
        let mut it = sections.into_iter();
        let cond = it.next().expect("checked");
        let scalars = it.next().expect("checked");
        let mut steps = Vec::with_capacity(k);
        for (i, stochastic) in flags.into_iter().enumerate() {
            let s = &scalars[6 * i..6 * i + 6];
            steps.push(StepRecord {
                t: s[0],
                dt: s[1],
                std: s[2],
                x_coef: s[3],
                v_coef: s[4],
                logp_old: stochastic.then_some(s[5]),
                stochastic,
                state: it.next().expect("checked"),
                mean: it.next().expect("checked"),
                offset: it.next().expect("checked"),
            });
        }
        let final_state = it.next().expect("checked");
        Ok(Self {
            rows,
            cols,
            cond_id,
            cond,
            full_logprob,
            steps,
            final_state,
        })
    }
}

/// Samples `n` trajectories for one condition together, applying group
/// guidance at every step. Initial noise is independent per member.
/// All randomness is drawn in a fixed order from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn sample_group<R: Rng + ?Sized>(
    field: &VelocityField,
    params: &[f64],
    cond_id: usize,
    cond: &[f64],
    cfg: &SamplerConfig,
    guidance: Option<&GuidanceConfig>,
    n: usize,
    window_start: Option<usize>,
    rng: &mut R,
) -> Result<Vec<DenoisingTrajectory>> {
    cfg.validate()?;
    let dim = field.dim();
    let dt = cfg.dt();
    let stochastic_kernel = cfg.stochastic_kernel();
    let mut xs: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(rng, dim)).collect();
    let mut records: Vec<Vec<StepRecord>> = vec![Vec::with_capacity(cfg.steps); n];
    for k in 0..cfg.steps {
        let t = 1.0 - k as f64 * dt;
        let use_noise = cfg.in_window(k, window_start);
        let coeffs: KernelCoeffs = if use_noise {
            step_coeffs(stochastic_kernel, t, dt, cfg.t_clamp)
        } else {
            step_coeffs(StepKernel::Ode, t, dt, cfg.t_clamp)
        };
        let stochastic = use_noise && coeffs.std > 0.0;
        let offsets = match guidance {
            Some(g) => group_offsets(&xs, cfg.steps - k, cfg.steps, g),
            None => vec![vec![0.0; dim]; n],
        };
        for (i, offset) in offsets.into_iter().enumerate() {
            let x = &xs[i];
            let v = field.eval(params, x, t, cond)?;
            let mean: Vec<f64> = coeffs
                .mean(x, &v)
                .iter()
                .zip(&offset)
                .map(|(m, o)| m + o)
                .collect();
            let (next, logp_old) = if stochastic {
                let eps = normal_vec(rng, dim);
                let next: Vec<f64> = mean.iter().zip(&eps).map(|(m, e)| m + coeffs.std * e).collect();
                let lp = kernel::transition_logprob(&next, &mean, coeffs.std, !cfg.full_logprob)?;
                (next, Some(lp))
            } else {
                (mean.clone(), None)
            };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("latent diverged at step {k}")));
            }
            records[i].push(StepRecord {
                t,
                dt,
                state: std::mem::replace(&mut xs[i], next),
                mean,
                std: if stochastic { coeffs.std } else { 0.0 },
                x_coef: coeffs.x_coef,
                v_coef: coeffs.v_coef,
                stochastic,
                offset,
                logp_old,
            });
        }
    }
    Ok(records
        .into_iter()
        .zip(xs)
        .map(|(steps, final_state)| DenoisingTrajectory {
            rows: field.rows,
            cols: field.cols,
            cond_id,
            cond: cond.to_vec(),
            full_logprob: cfg.full_logprob,
            steps,
            final_state,
        })
        .collect())
}

/// A single trajectory with its own window draw and no group guidance.
pub fn sample_trajectory<R: Rng + ?Sized>(
    field: &VelocityField,
    params: &[f64],
    cond_id: usize,
    cond: &[f64],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<DenoisingTrajectory> {
    let start = cfg.draw_window_start(rng);
    let mut group = sample_group(field, params, cond_id, cond, cfg, None, 1, start, rng)?;
    Ok(group.pop().expect("one member"))
}
