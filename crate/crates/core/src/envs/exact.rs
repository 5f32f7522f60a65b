use rand::Rng;

use super::modsum::modsum_reward;
use crate::error::{Error, Result};
use crate::tokens::{is_digit, Token, EOS, VOCAB};

/// Largest number of digit sequences [`exact_success_rate`] will enumerate.
pub const MAX_ENUMERATION: usize = 1_000_000;

/// An autoregressive distribution over answer tokens that can be queried for
/// its next-token probabilities after any prefix.
pub trait SequencePolicy {
    fn next_token_probs(&self, prefix: &[Token]) -> Result<Vec<f64>>;
}

/// Exact modsum success probability: the sum over every length-`answer_len`
/// digit sequence of its probability (digits then EOS) times its reward.
pub fn exact_success_rate<P: SequencePolicy + ?Sized>(
    policy: &P,
    target: usize,
    answer_len: usize,
) -> Result<f64> {
    10usize
        .checked_pow(answer_len as u32)
        .filter(|c| *c <= MAX_ENUMERATION)
        .ok_or_else(|| {
            Error::Capability(format!(
                "enumerating 10^{answer_len} sequences exceeds the limit of {MAX_ENUMERATION}"
            ))
        })?;
    let mut prefix = Vec::with_capacity(answer_len + 1);
    walk(policy, target, answer_len, &mut prefix, 1.0)
}

fn walk<P: SequencePolicy + ?Sized>(
    policy: &P,
    target: usize,
    answer_len: usize,
    prefix: &mut Vec<Token>,
    mass: f64,
) -> Result<f64> {
    let probs = policy.next_token_probs(prefix)?;
    if probs.len() != VOCAB {
        return Err(Error::Config(format!(
            "policy returned {} probabilities, vocabulary has {VOCAB}",
            probs.len()
        )));
    }
    if prefix.len() == answer_len {
        return Ok(mass * probs[EOS] * modsum_reward(prefix, target));
    }
    let mut total = 0.0;
    for (tok, p) in probs.iter().enumerate() {
        if !is_digit(tok) || *p == 0.0 {
            continue;
        }
        prefix.push(tok);
        total += walk(policy, target, answer_len, prefix, mass * p)?;
        prefix.pop();
    }
    Ok(total)
}

/// Fraction of `samples` ancestral draws (up to `max_len` tokens) that are
/// correct modsum answers.
pub fn monte_carlo_success_rate<P, R>(
    policy: &P,
    target: usize,
    answer_len: usize,
    max_len: usize,
    samples: usize,
    rng: &mut R,
) -> Result<f64>
where
    P: SequencePolicy + ?Sized,
    R: Rng + ?Sized,
{
    let mut hits = 0usize;
    let mut tokens = Vec::with_capacity(max_len);
    for _ in 0..samples {
        tokens.clear();
        while tokens.len() < max_len {
            let probs = policy.next_token_probs(&tokens)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            tokens.push(pick);
            if pick == EOS {
                break;
            }
        }
        if tokens.len() == answer_len + 1
            && tokens[answer_len] == EOS
            && modsum_reward(&tokens[..answer_len], target) == 1.0
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Uniform digits for `len` positions, then EOS with certainty.
    struct UniformDigits {
        len: usize,
    }

    impl SequencePolicy for UniformDigits {
        fn next_token_probs(&self, prefix: &[Token]) -> Result<Vec<f64>> {
            let mut p = vec![0.0; VOCAB];
            if prefix.len() < self.len {
                p[..10].fill(0.1);
            } else {
                p[EOS] = 1.0;
            }
            Ok(p)
        }
    }

    /// Always answers `digits` then EOS.
    struct Delta {
        digits: Vec<Token>,
    }

    impl SequencePolicy for Delta {
        fn next_token_probs(&self, prefix: &[Token]) -> Result<Vec<f64>> {
            let mut p = vec![0.0; VOCAB];
            p[self.digits.get(prefix.len()).copied().unwrap_or(EOS)] = 1.0;
            Ok(p)
        }
    }

    #[test]
    fn uniform_length_two_is_one_tenth() {
        for target in 0..10 {
            let r = exact_success_rate(&UniformDigits { len: 2 }, target, 2).unwrap();
            assert!((r - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_valid_answer_is_certain() {
        let r = exact_success_rate(&Delta { digits: vec![3, 4] }, 7, 2).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn too_long_is_a_capability_error() {
        let err = exact_success_rate(&UniformDigits { len: 9 }, 0, 9).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }
}
