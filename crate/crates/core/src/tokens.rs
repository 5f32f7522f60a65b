//! Answer vocabulary: the ten digits, then BOS and EOS.

pub type Token = usize;

pub const DIGITS: usize = 10;
pub const BOS: Token = 10;
pub const EOS: Token = 11;
pub const VOCAB: usize = 12;

pub fn is_digit(t: Token) -> bool {
    t < DIGITS
}

/// Digit payload of an EOS-terminated answer, or `None` when the answer never
/// terminates or contains a special token before EOS.
pub fn answer_payload(tokens: &[Token]) -> Option<&[Token]> {
    let eos = tokens.iter().position(|&t| t == EOS)?;
    let payload = &tokens[..eos];
    payload.iter().all(|&t| is_digit(t)).then_some(payload)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_requires_eos() {
        assert_eq!(answer_payload(&[1, 2, EOS]), Some(&[1, 2][..]));
        assert_eq!(answer_payload(&[1, 2]), None);
        assert_eq!(answer_payload(&[1, BOS, EOS]), None);
        assert_eq!(answer_payload(&[EOS]), Some(&[][..]));
    }
}
