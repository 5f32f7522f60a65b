use std::collections::BTreeSet;

use super::MODULUS;
use crate::tokens::{answer_payload, is_digit, Token};

/// 1 when the digits are non-empty and sum to `target` modulo 10.
pub fn modsum_reward(digits: &[Token], target: usize) -> f64 {
    if digits.is_empty() || !digits.iter().all(|&d| is_digit(d)) {
        return 0.0;
    }
    let sum: usize = digits.iter().sum();
    if sum % MODULUS == target % MODULUS {
        1.0
    } else {
        0.0
    }
}

/// Number of distinct correct digit multisets among `answers` for `target`.
pub fn modsum_mode_coverage(answers: &[Vec<Token>], target: usize, answer_len: usize) -> usize {
    let mut modes = BTreeSet::new();
    for a in answers {
        if let Some(digits) = answer_payload(a) {
            if digits.len() == answer_len && modsum_reward(digits, target) == 1.0 {
                let mut key = digits.to_vec();
                key.sort_unstable();
                modes.insert(key);
            }
        }
    }
    modes.len()
}
