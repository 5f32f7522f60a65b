//! Closed-form pieces of the denoising transition: the noise schedule, the
//! score identity, the three step kernels, Gaussian transition log-densities
//! and the per-step KL to a reference velocity.
//!
//! Time runs from `t = 1` (noise) to `t = 0` (data). Every kernel is affine in
//! the current state `x` and velocity `v`, so a step reduces to
//! [`KernelCoeffs`]: `μ = x_coef·x + v_coef·v` and a scalar std.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};

/// `a · sqrt(t / (1 - t))` with `t` clamped to `[ε_t, 1 - ε_t]`.
pub fn noise_scale(a: f64, t: f64, t_clamp: f64) -> f64 {
    let t = t.clamp(t_clamp, 1.0 - t_clamp);
    a * (t / (1.0 - t)).sqrt()
}

/// Score of the rectified-flow marginal from the velocity:
/// `-x/t - (1-t)/t · v`, `t` clamped below at `ε_t`.
pub fn score(v_out: &[f64], x_t: &[f64], t: f64, t_clamp: f64) -> Vec<f64> {
    let t = t.max(t_clamp);
    x_t.iter()
        .zip(v_out)
        .map(|(x, v)| -x / t - (1.0 - t) / t * v)
        .collect()
}

/// Which transition a denoising step uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepKernel {
    Ode,
    /// Euler–Maruyama on the marginal-preserving SDE with noise level `a`.
    Sde { a: f64 },
    /// Coefficient-preserving sampling with strength `eta ∈ [0, 1]`.
    Cps { eta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelCoeffs {
    pub x_coef: f64,
    pub v_coef: f64,
    pub std: f64,
}

impl KernelCoeffs {
    pub fn mean(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(v)
            .map(|(xi, vi)| self.x_coef * xi + self.v_coef * vi)
            .collect()
    }
}

/// Coefficients for a step from `t` to `t - dt`.
///
/// The SDE drift is `v + σ_t²/(2t)·(x + (1-t)v)`, applied backwards in time so
/// that `a = 0` is exactly the Euler ODE step. On the first step (`t = 1`)
/// the schedule's `1 - t` denominator is floored at `dt`; otherwise the step
/// from pure noise would blow up.
pub fn step_coeffs(kernel: StepKernel, t: f64, dt: f64, t_clamp: f64) -> KernelCoeffs {
    match kernel {
        StepKernel::Ode => KernelCoeffs {
            x_coef: 1.0,
            v_coef: -dt,
            std: 0.0,
        },
        StepKernel::Sde { a } => {
            let tc = t.clamp(t_clamp, 1.0);
            let sigma = a * (tc / (1.0 - tc).max(dt.max(t_clamp))).sqrt();
            let c = sigma * sigma / (2.0 * tc);
            KernelCoeffs {
                x_coef: 1.0 - c * dt,
                v_coef: -dt * (1.0 + c * (1.0 - tc)),
                std: sigma * dt.sqrt(),
            }
        }
        StepKernel::Cps { eta } => {
            let s = (t - dt).max(0.0);
            let (sin, cos) = (eta * FRAC_PI_2).sin_cos();
            KernelCoeffs {
                x_coef: (1.0 - s) + s * cos,
                v_coef: -(1.0 - s) * t + s * cos * (1.0 - t),
                std: s * sin,
            }
        }
    }
}

/// Deterministic reverse-time Euler step `x - v·dt`.
pub fn ode_update(x: &[f64], v: &[f64], dt: f64) -> Vec<f64> {
    x.iter().zip(v).map(|(xi, vi)| xi - vi * dt).collect()
}

/// Euler–Maruyama step; returns `(next, μ, σ)`.
pub fn sde_update(
    x: &[f64],
    v: &[f64],
    t: f64,
    dt: f64,
    a: f64,
    noise: &[f64],
    t_clamp: f64,
) -> (Vec<f64>, Vec<f64>, f64) {
    let k = step_coeffs(StepKernel::Sde { a }, t, dt, t_clamp);
    let mu = k.mean(x, v);
    let next = mu.iter().zip(noise).map(|(m, e)| m + k.std * e).collect();
    (next, mu, k.std)
}

/// Clean-sample and noise predictions `(x̂0, x̂1)` implied by the velocity.
pub fn cps_predict(x_t: &[f64], t: f64, v_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let x0 = x_t.iter().zip(v_out).map(|(x, v)| x - t * v).collect();
    let x1 = x_t.iter().zip(v_out).map(|(x, v)| x + (1.0 - t) * v).collect();
    (x0, x1)
}

/// CPS step from the predictions; returns `(next, μ, σ)`.
pub fn cps_update(
    x: &[f64],
    v: &[f64],
    t: f64,
    dt: f64,
    eta: f64,
    noise: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Domain(format!("CPS strength {eta} outside [0, 1]")));
    }
    let s = t - dt;
    if s < -1e-12 {
        return Err(Error::Domain("CPS step past t = 0".into()));
    }
    let s = s.max(0.0);
    let (x0, x1) = cps_predict(x, t, v);
    let (sin, cos) = (eta * FRAC_PI_2).sin_cos();
    let sigma = s * sin;
    let mu: Vec<f64> = x0
        .iter()
        .zip(&x1)
        .map(|(a, b)| (1.0 - s) * a + s * cos * b)
        .collect();
    let next = mu.iter().zip(noise).map(|(m, e)| m + sigma * e).collect();
    Ok((next, mu, sigma))
}

/// CPS strength whose per-step std equals the Euler–Maruyama std at the
/// mid-trajectory step `t = 0.5 → 0.5 - dt`.
pub fn matched_cps_eta(a: f64, dt: f64, t_clamp: f64) -> f64 {
    let target = step_coeffs(StepKernel::Sde { a }, 0.5, dt, t_clamp).std;
    let s = 0.5 - dt;
    if s <= 0.0 {
        return 1.0;
    }
    (target / s).min(1.0).asin() / FRAC_PI_2
}

/// Squared distance, summed in index order. Shared by every log-prob path so
/// that recomputation is bit-identical to rollout.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    d.iter().zip(&d).map(|(x, y)| x * y).sum()
}

/// `-‖x - μ‖²` (simplified) or the full isotropic Gaussian log-density.
pub fn transition_logprob(x_next: &[f64], mean: &[f64], sigma: f64, simplified: bool) -> Result<f64> {
    let s = sq_dist(x_next, mean);
    if simplified {
        return Ok(-s);
    }
    if !(sigma > 0.0) {
        return Err(Error::DegenerateKernel(format!(
            "full log-density needs σ > 0, got {sigma}"
        )));
    }
    Ok((-1.0 / (2.0 * sigma * sigma)) * s + full_logprob_const(sigma, x_next.len()))
}

/// `-dim·(log σ + log √(2π))`.
pub fn full_logprob_const(sigma: f64, dim: usize) -> f64 {
    -(dim as f64) * (sigma.ln() + (2.0 * PI).sqrt().ln())
}

/// Multiplier of `‖v - v_ref‖²` in the closed-form per-step KL.
pub fn kl_coefficient(t: f64, a: f64, dt: f64, t_clamp: f64) -> Result<f64> {
    if a == 0.0 {
        return Err(Error::Domain("KL term undefined for a = 0".into()));
    }
    let tc = t.clamp(t_clamp, 1.0 - t_clamp);
    let sigma = noise_scale(a, tc, t_clamp);
    let inner = sigma * (1.0 - tc) / (2.0 * tc) + 1.0 / sigma;
    Ok(0.5 * dt * inner * inner)
}

/// `(dt/2)·(σ_t(1-t)/(2t) + 1/σ_t)²·‖v - v_ref‖²`.
pub fn kl_term(v_out: &[f64], v_ref_out: &[f64], t: f64, a: f64, dt: f64, t_clamp: f64) -> Result<f64> {
    Ok(kl_coefficient(t, a, dt, t_clamp)? * sq_dist(v_out, v_ref_out))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS_T: f64 = 1e-3;

    #[test]
    fn noise_scale_cases() {
        assert_eq!(noise_scale(0.8, 0.5, EPS_T), 0.8);
        assert_eq!(noise_scale(0.0, 0.3, EPS_T), 0.0);
        assert!((noise_scale(0.7, 0.8, EPS_T) - 1.4).abs() < 1e-12);
        assert!(noise_scale(0.8, 1.0, EPS_T).is_finite());
    }

    #[test]
    fn score_cases() {
        assert_eq!(score(&[0.0], &[2.0], 0.5, EPS_T), vec![-4.0]);
        assert_eq!(score(&[0.0], &[0.0], 0.5, EPS_T), vec![0.0]);
        assert!((score(&[-1.0], &[1.0], 0.25, EPS_T)[0] + 1.0).abs() < 1e-12);
        assert!(score(&[1.0], &[1.0], 0.0, EPS_T)[0].is_finite());
    }

    #[test]
    fn sde_with_zero_noise_is_the_ode_step() {
        let x = [0.3, -1.2, 2.0];
        let v = [1.1, 0.4, -0.7];
        for &t in &[1.0, 0.7, 0.1] {
            let (next, mu, s) = sde_update(&x, &v, t, 0.1, 0.0, &[9.0, 9.0, 9.0], EPS_T);
            assert_eq!(s, 0.0);
            assert_eq!(mu, ode_update(&x, &v, 0.1));
            assert_eq!(next, mu);
        }
    }

    #[test]
    fn sde_scalar_hand_case() {
        // drift (v + 0.64/(2·0.5)·(x + 0.5 v))·dt = (-1 + 0.32)·0.1 = -0.068
        let (_, mu, s) = sde_update(&[1.0], &[-1.0], 0.5, 0.1, 0.8, &[0.0], EPS_T);
        assert!((mu[0] - 1.068).abs() < 1e-12);
        assert!((s - 0.8 * 0.1f64.sqrt()).abs() < 1e-15);
        assert!((s - 0.252_982).abs() < 1e-6);
    }

    #[test]
    fn sde_first_step_is_bounded() {
        let k = step_coeffs(StepKernel::Sde { a: 0.8 }, 1.0, 0.1, EPS_T);
        assert!((k.std - 0.8).abs() < 1e-12);
        assert!(k.x_coef.abs() < 1.0);
    }

    #[test]
    fn cps_predict_inverts_the_interpolant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x0: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x1: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t: f64 = rng.random_range(0.0..1.0);
            let xt: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let v: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| b - a).collect();
            let (h0, h1) = cps_predict(&xt, t, &v);
            for i in 0..4 {
                assert!((h0[i] - x0[i]).abs() < 1e-12);
                assert!((h1[i] - x1[i]).abs() < 1e-12);
            }
        }
        let (a, b) = cps_predict(&[0.5, 2.0], 0.3, &[0.0, 0.0]);
        assert_eq!(a, vec![0.5, 2.0]);
        assert_eq!(b, vec![0.5, 2.0]);
    }

    #[test]
    fn cps_eta_endpoints() {
        let x = [0.4, -0.2];
        let v = [1.0, 0.5];
        let (t, dt) = (0.6, 0.1);
        let s = 0.5;
        let (h0, h1) = cps_predict(&x, t, &v);
        let (next, mu, sig) = cps_update(&x, &v, t, dt, 0.0, &[3.0, 3.0]).unwrap();
        assert_eq!(sig, 0.0);
        assert_eq!(next, mu);
        for i in 0..2 {
            assert!((mu[i] - ((1.0 - s) * h0[i] + s * h1[i])).abs() < 1e-15);
        }
        let (_, mu1, sig1) = cps_update(&x, &v, t, dt, 1.0, &[0.0, 0.0]).unwrap();
        assert!((sig1 - s).abs() < 1e-15);
        for i in 0..2 {
            assert!((mu1[i] - (1.0 - s) * h0[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn cps_coefficient_identity() {
        for i in 0..=100 {
            let eta = i as f64 / 100.0;
            for &s in &[0.05, 0.3, 0.9] {
                let sigma = s * (eta * FRAC_PI_2).sin();
                let lhs = (s * s - sigma * sigma).max(0.0).sqrt();
                let rhs = s * (eta * FRAC_PI_2).cos();
                assert!((lhs - rhs).abs() <= 1e-12, "eta={eta} s={s}");
            }
        }
    }

    #[test]
    fn cps_coeffs_agree_with_prediction_form() {
        let x = [0.7, -1.3];
        let v = [0.2, 0.9];
        for &eta in &[0.0, 0.3, 1.0] {
            let k = step_coeffs(StepKernel::Cps { eta }, 0.8, 0.1, EPS_T);
            let (_, mu, sig) = cps_update(&x, &v, 0.8, 0.1, eta, &[0.0, 0.0]).unwrap();
            let mu2 = k.mean(&x, &v);
            assert!((k.std - sig).abs() < 1e-15);
            for i in 0..2 {
                assert!((mu[i] - mu2[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matched_eta_reproduces_the_sde_std() {
        let eta = matched_cps_eta(0.8, 0.1, EPS_T);
        let k = step_coeffs(StepKernel::Cps { eta }, 0.5, 0.1, EPS_T);
        assert!((k.std - 0.8 * 0.1f64.sqrt()).abs() < 1e-12);
        assert!(eta > 0.0 && eta < 1.0);
    }

    #[test]
    fn logprob_cases() {
        assert_eq!(transition_logprob(&[0.5], &[0.0], 0.0, true).unwrap(), -0.25);
        assert_eq!(transition_logprob(&[0.2, 0.3], &[0.2, 0.3], 0.0, true).unwrap(), 0.0);
        let full = transition_logprob(&[0.5], &[0.0], 1.0, false).unwrap();
        let expected = -0.125 - (2.0 * PI).sqrt().ln();
        assert!((full - expected).abs() < 1e-15);
        assert!((full + 1.043_938_533).abs() < 1e-9);
        assert!(matches!(
            transition_logprob(&[0.5], &[0.0], 0.0, false),
            Err(Error::DegenerateKernel(_))
        ));
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_term(&[0.3], &[0.3], 0.5, 0.8, 0.1, EPS_T).unwrap(), 0.0);
        let k = kl_term(&[1.0], &[0.0], 0.5, 0.8, 0.1, EPS_T).unwrap();
        assert!((k - 0.136_125).abs() < 1e-9);
        let k4 = kl_term(&[2.0], &[0.0], 0.5, 0.8, 0.1, EPS_T).unwrap();
        assert!((k4 - 4.0 * k).abs() < 1e-12);
        assert!(kl_term(&[1.0], &[0.0], 0.5, 0.0, 0.1, EPS_T).is_err());
    }
}
