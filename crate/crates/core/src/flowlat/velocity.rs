use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::kernel;
use crate::error::{config_err, Result};
use crate::numcore::{evaluate, Graph, MlpSpec, Var};

/// Number of scalar time features fed to the velocity network.
pub const TIME_FEATURES: usize = 5;

pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    [
        t,
        (PI * t).sin(),
        (PI * t).cos(),
        (2.0 * PI * t).sin(),
        (2.0 * PI * t).cos(),
    ]
}

/// `v(x, t, cond)`: an MLP over `x ‖ time features ‖ cond` living at
/// `offset` in a shared parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityField {
    pub spec: MlpSpec,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub cond_dim: usize,
}

impl VelocityField {
    pub fn new(rows: usize, cols: usize, cond_dim: usize, hidden: &[usize], offset: usize) -> Self {
        let dim = rows * cols;
        let mut widths = vec![dim + TIME_FEATURES + cond_dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        Self {
            spec: MlpSpec::tanh_hidden(widths),
            offset,
            rows,
            cols,
            cond_dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.param_count()
    }

    /// Records `v(x, t, cond)` on `g` for a state node `x`.
    pub fn node(&self, g: &mut Graph<'_>, x: Var, t: f64, cond: &[f64]) -> Result<Var> {
        if cond.len() != self.cond_dim {
            return config_err(format!(
                "velocity field expects a condition of length {}, got {}",
                self.cond_dim,
                cond.len()
            ));
        }
        let mut side = time_features(t).to_vec();
        side.extend_from_slice(cond);
        let side = g.constant(side);
        let input = g.concat(&[x, side]);
        self.spec.forward(g, self.offset, input)
    }

    /// Plain evaluation. Bit-identical to [`VelocityField::node`] on a
    /// constant state.
    pub fn eval(&self, params: &[f64], x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new(params);
        let xv = g.constant(x.to_vec());
        let out = self.node(&mut g, xv, t, cond)?;
        Ok(g.value(out).to_vec())
    }
}

/// One Monte-Carlo draw for the flow-matching objective.
#[derive(Debug, Clone, PartialEq)]
pub struct FmDraw {
    pub t: f64,
    pub noise: Vec<f64>,
}

/// `t ~ U(ε_t, 1 - ε_t)` and a standard-normal endpoint per example.
pub fn draw_fm<R: Rng + ?Sized>(rng: &mut R, count: usize, dim: usize, t_clamp: f64) -> Vec<FmDraw> {
    (0..count)
        .map(|_| {
            let t = rng.random_range(t_clamp..1.0 - t_clamp);
            let noise = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            FmDraw { t, noise }
        })
        .collect()
}

/// `‖(x1 - x0) - v(x_t, t, cond)‖²` for one example whose data point `x0`
/// is a graph node (so gradients may flow into whatever produced it).
pub fn fm_term(g: &mut Graph<'_>, field: &VelocityField, x0: Var, cond: &[f64], draw: &FmDraw) -> Result<Var> {
    let x1 = g.constant(draw.noise.clone());
    let a = g.scale(x0, 1.0 - draw.t);
    let b = g.scale(x1, draw.t);
    let xt = g.add(a, b);
    let target = g.sub(x1, x0);
    let v = field.node(g, xt, draw.t, cond)?;
    let err = g.sub(target, v);
    Ok(g.sq_norm(err))
}

/// Batch-mean flow-matching loss with pre-drawn `(t, x1)`.
pub fn fm_loss_graph(
    g: &mut Graph<'_>,
    field: &VelocityField,
    batch: &[(Vec<f64>, Vec<f64>)],
    draws: &[FmDraw],
) -> Result<Var> {
    if batch.is_empty() {
        return config_err("flow-matching batch is empty");
    }
    if draws.len() != batch.len() {
        return config_err("one flow-matching draw per example required");
    }
    let mut terms = Vec::with_capacity(batch.len());
    for ((x0, cond), draw) in batch.iter().zip(draws) {
        let x0 = g.constant(x0.clone());
        terms.push(fm_term(g, field, x0, cond, draw)?);
    }
    let total = g.add_all(&terms);
    Ok(g.scale(total, 1.0 / batch.len() as f64))
}

/// Flow-matching loss over `batch` of `(x0, cond)` pairs.
pub fn fm_loss<R: Rng + ?Sized>(
    field: &VelocityField,
    params: &[f64],
    batch: &[(Vec<f64>, Vec<f64>)],
    t_clamp: f64,
    rng: &mut R,
) -> Result<f64> {
    let draws = draw_fm(rng, batch.len(), field.dim(), t_clamp);
    evaluate(params, |g| fm_loss_graph(g, field, batch, &draws))
}

/// Flow-matching loss for an arbitrary velocity function `v(x_t, t, cond)`,
/// evaluated in plain floating point.
pub fn fm_loss_with<F>(batch: &[(Vec<f64>, Vec<f64>)], draws: &[FmDraw], v: F) -> Result<f64>
where
    F: Fn(&[f64], f64, &[f64]) -> Vec<f64>,
{
    if batch.is_empty() || draws.len() != batch.len() {
        return config_err("flow-matching batch is empty or draws are missing");
    }
    let mut total = 0.0;
    for ((x0, cond), d) in batch.iter().zip(draws) {
        let xt: Vec<f64> = x0.iter().zip(&d.noise).map(|(a, b)| (1.0 - d.t) * a + d.t * b).collect();
        let out = v(&xt, d.t, cond);
        total += x0
            .iter()
            .zip(&d.noise)
            .zip(&out)
            .map(|((a, b), o)| (b - a - o).powi(2))
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Reverse-time Euler step with the network velocity.
pub fn ode_step(
    field: &VelocityField,
    params: &[f64],
    x: &[f64],
    t: f64,
    dt: f64,
    cond: &[f64],
) -> Result<Vec<f64>> {
    let v = field.eval(params, x, t, cond)?;
    Ok(kernel::ode_update(x, &v, dt))
}

/// Euler–Maruyama step with the network velocity; `(next, μ, σ)`.
#[allow(clippy::too_many_arguments)]
pub fn sde_step(
    field: &VelocityField,
    params: &[f64],
    x: &[f64],
    t: f64,
    dt: f64,
    a: f64,
    noise: &[f64],
    cond: &[f64],
    t_clamp: f64,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let v = field.eval(params, x, t, cond)?;
    Ok(kernel::sde_update(x, &v, t, dt, a, noise, t_clamp))
}

/// CPS step with the network velocity; `(next, μ, σ)`.
#[allow(clippy::too_many_arguments)]
pub fn cps_step(
    field: &VelocityField,
    params: &[f64],
    x: &[f64],
    t: f64,
    dt: f64,
    eta: f64,
    noise: &[f64],
    cond: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let v = field.eval(params, x, t, cond)?;
    kernel::cps_update(x, &v, t, dt, eta, noise)
}
