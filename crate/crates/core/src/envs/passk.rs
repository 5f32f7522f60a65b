use crate::error::{Error, Result};

/// Unbiased pass@k from `n` samples of which `c` are correct:
/// `1 - C(n-c, k) / C(n, k)`. Uses exact integer binomials when they fit in
/// `u128` (one rounding, identical to counting subsets), otherwise a running
/// product.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::Domain(format!("pass@k needs 1 <= k <= n, got k={k}, n={n}")));
    }
    if c > n {
        return Err(Error::Domain(format!("{c} correct out of {n} samples")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    if let (Some(total), Some(miss)) = (binomial(n, k), binomial(n - c, k)) {
        return Ok((total - miss) as f64 / total as f64);
    }
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

/// `C(n, k)`, or `None` on overflow.
fn binomial(n: usize, k: usize) -> Option<u128> {
    let k = k.min(n - k);
    (0..k).try_fold(1u128, |acc, i| Some(acc.checked_mul((n - i) as u128)? / (i as u128 + 1)))
}
