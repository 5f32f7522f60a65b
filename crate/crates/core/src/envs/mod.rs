//! Verifiable-reward toy tasks, the pass@k estimator and exact oracles.
//!
//! * `modsum`: the question is a residue `r` in `0..10`; an answer is exactly
//!   `L` digits followed by EOS, rewarded 1 when the digit sum is `r` mod 10.
//! * `mixture`: the final latent itself is a 2-D point, rewarded by its
//!   distance to the nearest of a few target centers.

mod exact;
mod mixture;
mod modsum;
mod passk;

pub use exact::{exact_success_rate, monte_carlo_success_rate, SequencePolicy, MAX_ENUMERATION};
pub use mixture::{mixture_mode_coverage, mixture_reward};
pub use modsum::{modsum_mode_coverage, modsum_reward};
pub use passk::pass_at_k;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tokens::{answer_payload, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Modsum,
    Mixture,
}

/// A question `Q`: task id plus a fixed-size feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub task: TaskKind,
    /// Residue for modsum, 0 for mixture.
    pub id: usize,
    pub features: Vec<f64>,
}

pub const MODULUS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvSpec {
    Modsum {
        answer_len: usize,
    },
    Mixture {
        centers: Vec<[f64; 2]>,
        radius: f64,
    },
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Modsum { answer_len: 4 }
    }
}

impl EnvSpec {
    /// `count` centers evenly spaced on a circle of radius `ring`.
    pub fn ring_mixture(count: usize, ring: f64, radius: f64) -> Self {
        let centers = (0..count)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / count as f64;
                [ring * a.cos(), ring * a.sin()]
            })
            .collect();
        EnvSpec::Mixture { centers, radius }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            EnvSpec::Modsum { .. } => TaskKind::Modsum,
            EnvSpec::Mixture { .. } => TaskKind::Mixture,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EnvSpec::Modsum { answer_len } => {
                if *answer_len == 0 {
                    return config_err("modsum answer length must be positive");
                }
            }
            EnvSpec::Mixture { centers, radius } => {
                if centers.is_empty() {
                    return config_err("mixture needs at least one center");
                }
                if !(*radius > 0.0) {
                    return config_err("mixture acceptance radius must be positive");
                }
                for (i, a) in centers.iter().enumerate() {
                    if !a.iter().all(|x| x.is_finite()) {
                        return config_err("mixture centers must be finite");
                    }
                    if centers[..i].iter().any(|b| b == a) {
                        return config_err("mixture centers must be pairwise distinct");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn condition_dim(&self) -> usize {
        match self {
            EnvSpec::Modsum { .. } => MODULUS,
            EnvSpec::Mixture { .. } => 2,
        }
    }

    /// Every question the task can pose.
    pub fn conditions(&self) -> Vec<Condition> {
        match self {
            EnvSpec::Modsum { .. } => (0..MODULUS).map(modsum_condition).collect(),
            EnvSpec::Mixture { centers, .. } => {
                let n = centers.len() as f64;
                let cx = centers.iter().map(|c| c[0]).sum::<f64>() / n;
                let cy = centers.iter().map(|c| c[1]).sum::<f64>() / n;
                vec![Condition {
                    task: TaskKind::Mixture,
                    id: 0,
                    features: vec![cx, cy],
                }]
            }
        }
    }

    /// Reward of a text answer (modsum). Malformed answers score 0.
    pub fn answer_reward(&self, tokens: &[Token], cond: &Condition) -> f64 {
        match self {
            EnvSpec::Modsum { answer_len } => match answer_payload(tokens) {
                Some(digits) if digits.len() == *answer_len => modsum_reward(digits, cond.id),
                _ => 0.0,
            },
            EnvSpec::Mixture { .. } => 0.0,
        }
    }

    /// Reward of a final latent read as a point (mixture).
    pub fn point_reward(&self, point: &[f64]) -> f64 {
        match self {
            EnvSpec::Mixture { centers, radius } if point.len() >= 2 => {
                mixture_reward([point[0], point[1]], centers, *radius)
            }
            _ => 0.0,
        }
    }
}

pub fn modsum_condition(target: usize) -> Condition {
    let mut features = vec![0.0; MODULUS];
    features[target % MODULUS] = 1.0;
    Condition {
        task: TaskKind::Modsum,
        id: target % MODULUS,
        features,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::EOS;

    #[test]
    fn answer_reward_requires_exact_length_and_eos() {
        let env = EnvSpec::Modsum { answer_len: 2 };
        let c = modsum_condition(7);
        assert_eq!(env.answer_reward(&[3, 4, EOS], &c), 1.0);
        assert_eq!(env.answer_reward(&[3, 4], &c), 0.0);
        assert_eq!(env.answer_reward(&[7, EOS], &c), 0.0);
        assert_eq!(env.answer_reward(&[EOS], &c), 0.0);
    }

    #[test]
    fn mixture_validation() {
        assert!(EnvSpec::ring_mixture(4, 2.0, 0.3).validate().is_ok());
        let dup = EnvSpec::Mixture {
            centers: vec![[0.0, 0.0], [0.0, 0.0]],
            radius: 0.3,
        };
        assert!(dup.validate().is_err());
        let bad = EnvSpec::Mixture {
            centers: vec![[0.0, 0.0]],
            radius: 0.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn conditions_are_fixed_dimension() {
        let env = EnvSpec::default();
        let conds = env.conditions();
        assert_eq!(conds.len(), 10);
        assert!(conds.iter().all(|c| c.features.len() == env.condition_dim()));
    }
}
