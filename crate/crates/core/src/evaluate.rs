//! Sampling-based evaluation: pass@k, mean reward, mode coverage and answer
//! entropy over a fixed question set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arbaseline::ArPolicy;
use crate::envs::{mixture_mode_coverage, modsum_mode_coverage, pass_at_k, Condition, EnvSpec};
use crate::error::{config_err, Result};
use crate::flowlat::{sample_trajectory, SamplerConfig, VelocityField};
use crate::reasoner::{infer, LatentReasoner};
use crate::textpol::{AnswerSample, SamplingOptions};
use crate::tokens::Token;

/// What one evaluation sample produced.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalOutput {
    Answer(AnswerSample),
    Point(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples_per_question: usize,
    pub questions: usize,
    pub mean_reward: f64,
    /// `(k, pass@k)` averaged over questions, k ascending.
    pub pass_at_k: Vec<(usize, f64)>,
    /// Mean over questions of the number of distinct solution modes hit.
    pub mode_coverage: f64,
    /// Mean per-token entropy of sampled answers (0 for point outputs).
    pub entropy: f64,
}

impl EvalReport {
    pub fn pass_at(&self, k: usize) -> Option<f64> {
        self.pass_at_k.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// Standard k grid: powers of two up to `samples`.
pub fn default_ks(samples: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |k| Some(k * 2))
        .take_while(|k| *k <= samples)
        .collect()
}

/// Draws `samples` outputs per question with `draw` and aggregates. An
/// output counts as correct when its reward is 1.
pub fn evaluate_with<R, F>(
    env: &EnvSpec,
    questions: &[Condition],
    samples: usize,
    ks: &[usize],
    rng: &mut R,
    mut draw: F,
) -> Result<EvalReport>
where
    R: Rng + ?Sized,
    F: FnMut(&Condition, &mut R) -> Result<EvalOutput>,
{
    if questions.is_empty() || samples == 0 {
        return config_err("evaluation needs at least one question and one sample");
    }
    let mut ks: Vec<usize> = ks.iter().copied().filter(|k| (1..=samples).contains(k)).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut pass = vec![0.0; ks.len()];
    let (mut reward_sum, mut coverage_sum) = (0.0, 0.0);
    let mut answers_all: Vec<AnswerSample> = Vec::new();
    for q in questions {
        let mut correct = 0usize;
        let mut tokens: Vec<Vec<Token>> = Vec::new();
        let mut points: Vec<[f64; 2]> = Vec::new();
        for _ in 0..samples {
            let r = match draw(q, rng)? {
                EvalOutput::Answer(a) => {
                    let r = env.answer_reward(&a.tokens, q);
                    tokens.push(a.tokens.clone());
                    answers_all.push(a);
                    r
                }
                EvalOutput::Point(p) => {
                    let r = env.point_reward(&p);
                    if p.len() >= 2 {
                        points.push([p[0], p[1]]);
                    }
                    r
                }
            };
            reward_sum += r;
            if r >= 1.0 {
                correct += 1;
            }
        }
        for (acc, &k) in pass.iter_mut().zip(&ks) {
            *acc += pass_at_k(samples, correct, k)?;
        }
        coverage_sum += match env {
            EnvSpec::Modsum { answer_len } => modsum_mode_coverage(&tokens, q.id, *answer_len),
            EnvSpec::Mixture { centers, radius } => mixture_mode_coverage(&points, centers, *radius),
        } as f64;
    }
    let nq = questions.len() as f64;
    Ok(EvalReport {
        samples_per_question: samples,
        questions: questions.len(),
        mean_reward: reward_sum / (nq * samples as f64),
        pass_at_k: ks.into_iter().zip(pass.into_iter().map(|p| p / nq)).collect(),
        mode_coverage: coverage_sum / nq,
        entropy: crate::textpol::mean_token_entropy(&answers_all),
    })
}

/// Latent reasoner: denoise with `sampler`, decode one answer per latent.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_reasoner<R: Rng + ?Sized>(
    model: &LatentReasoner,
    params: &[f64],
    env: &EnvSpec,
    questions: &[Condition],
    samples: usize,
    sampler: &SamplerConfig,
    opts: &SamplingOptions,
    rng: &mut R,
) -> Result<EvalReport> {
    evaluate_with(env, questions, samples, &default_ks(samples), rng, |q, rng| {
        let (_, a) = infer(model, params, q, sampler, opts, rng)?;
        Ok(EvalOutput::Answer(a))
    })
}

/// Latent-scored task: the final latent itself is the output.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_points<R: Rng + ?Sized>(
    field: &VelocityField,
    params: &[f64],
    env: &EnvSpec,
    questions: &[Condition],
    samples: usize,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<EvalReport> {
    evaluate_with(env, questions, samples, &default_ks(samples), rng, |q, rng| {
        let tr = sample_trajectory(field, params, q.id, &q.features, sampler, rng)?;
        Ok(EvalOutput::Point(tr.final_state))
    })
}

/// Autoregressive baseline.
pub fn evaluate_ar<R: Rng + ?Sized>(
    policy: &ArPolicy,
    params: &[f64],
    env: &EnvSpec,
    questions: &[Condition],
    samples: usize,
    opts: &SamplingOptions,
    rng: &mut R,
) -> Result<EvalReport> {
    evaluate_with(env, questions, samples, &default_ks(samples), rng, |q, rng| {
        Ok(EvalOutput::Answer(policy.text.sample_answer(params, &q.features, None, opts, rng)?))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::modsum_condition;
    use crate::numcore::seeded_rng;
    use crate::tokens::EOS;

    #[test]
    fn ks_are_powers_of_two() {
        assert_eq!(default_ks(20), vec![1, 2, 4, 8, 16]);
        assert_eq!(default_ks(1), vec![1]);
    }

    #[test]
    fn fixed_outputs_give_exact_pass_rates() {
        let env = EnvSpec::Modsum { answer_len: 2 };
        let qs = [modsum_condition(3)];
        let mut i = 0;
        // Answers alternate between [1,2] (correct, mode {1,2}), [0,3]
        // (correct, second mode) and [5,5] (wrong): 4 of 6 correct.
        let seq = [vec![1, 2, EOS], vec![5, 5, EOS], vec![0, 3, EOS], vec![2, 1, EOS], vec![5, 5, EOS], vec![3, 0, EOS]];
        let rep = evaluate_with(&env, &qs, 6, &[1, 2, 6, 9], &mut seeded_rng(0), |_, _| {
            let t = seq[i].clone();
            i += 1;
            Ok(EvalOutput::Answer(AnswerSample {
                logps: vec![0.0; t.len()],
                entropies: vec![1.0; t.len()],
                tokens: t,
                reward: 0.0,
            }))
        })
        .unwrap();
        assert!((rep.pass_at(1).unwrap() - 4.0 / 6.0).abs() < 1e-12);
        assert!((rep.pass_at(2).unwrap() - (1.0 - 1.0 / 15.0)).abs() < 1e-12);
        assert_eq!(rep.pass_at(6), Some(1.0));
        assert_eq!(rep.pass_at(9), None);
        assert_eq!(rep.mode_coverage, 2.0);
        assert!((rep.entropy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pass_at_k_is_monotone() {
        let env = EnvSpec::Modsum { answer_len: 2 };
        let p = ArPolicy::new(10, 3, 6, 4).unwrap();
        let params = p.init_params(1.0, &mut seeded_rng(1));
        let qs: Vec<_> = (0..3).map(modsum_condition).collect();
        let rep = evaluate_ar(&p, &params.values, &env, &qs, 16, &SamplingOptions::default(), &mut seeded_rng(2)).unwrap();
        for w in rep.pass_at_k.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
    }
}
