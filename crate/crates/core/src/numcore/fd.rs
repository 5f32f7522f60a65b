use super::tape::{evaluate, grad, Graph, Var};
use crate::error::{config_err, Result};

/// Worst relative disagreement between the tape gradient and central
/// differences, over every coordinate of `params`.
///
/// The difference quotient carries a rounding error of about
/// `ε·(|L(p+h)| + |L(p-h)|) / 2h`; discrepancies within four times that bound
/// are not counted, so tiny gradient entries are not judged on round-off.
///
/// The loss closure is invoked once per perturbation, so it must be a pure
/// function of the parameters (seed any randomness inside it).
pub fn finite_diff_check<F>(params: &[f64], step: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_coords(params, step, &coords, loss)
}

/// As [`finite_diff_check`] but only over `coords`.
pub fn finite_diff_check_coords<F>(
    params: &[f64],
    step: f64,
    coords: &[usize],
    loss: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if step <= 0.0 {
        return config_err("finite-difference step must be positive");
    }
    let (_, analytic) = grad(params, &loss)?;
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = evaluate(&probe, &loss)?;
        probe[i] = orig - step;
        let down = evaluate(&probe, &loss)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let rounding = 4.0 * f64::EPSILON * (up.abs() + down.abs()) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(((analytic[i] - numeric).abs() - rounding).max(0.0) / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = finite_diff_check(&[3.0], 1e-4, |g| {
            let p = g.param(0, 1);
            let sq = g.mul(p, p);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let err = finite_diff_check(&[1.0, 2.0], 1e-4, |g| Ok(g.constant_scalar(3.0))).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_diff_check(&[1.0], 0.0, |g| Ok(g.constant_scalar(0.0))).is_err());
    }
}
