use super::kernel::full_logprob_const;
use super::sampler::DenoisingTrajectory;
use super::velocity::VelocityField;
use crate::error::{Error, Result};
use crate::numcore::{Graph, Var};

/// Current-policy log-probability of recorded step `k`, plus the velocity
/// node it was computed from.
///
/// The mean is rebuilt as `x_coef·x + v_coef·v(x) + offset` with the
/// recorded guidance offset held fixed, in the same operation order the
/// sampler uses, so an unchanged policy reproduces the stored value
/// bit-for-bit.
pub fn step_logprob_node(
    g: &mut Graph<'_>,
    field: &VelocityField,
    traj: &DenoisingTrajectory,
    k: usize,
) -> Result<(Var, Var)> {
    let step = traj
        .steps
        .get(k)
        .ok_or_else(|| Error::Data(format!("trajectory has no step {k}")))?;
    if !step.stochastic {
        return Err(Error::Data(format!("step {k} is deterministic and has no log-probability")));
    }
    let x = g.constant(step.state.clone());
    let v = field.node(g, x, step.t, &traj.cond)?;
    let xc = g.constant(step.state.iter().map(|xi| step.x_coef * xi).collect());
    let vc = g.scale(v, step.v_coef);
    let base = g.add(xc, vc);
    let off = g.constant(step.offset.clone());
    let mean = g.add(base, off);
    let next = g.constant(traj.next_state(k).to_vec());
    let d = g.sub(next, mean);
    let sq = g.sq_norm(d);
    let lp = if traj.full_logprob {
        let sigma = step.std;
        let scaled = g.scale(sq, -1.0 / (2.0 * sigma * sigma));
        g.shift(scaled, full_logprob_const(sigma, step.state.len()))
    } else {
        g.scale(sq, -1.0)
    };
    Ok((lp, v))
}

/// Plain-value version of [`step_logprob_node`].
pub fn step_logprob(params: &[f64], field: &VelocityField, traj: &DenoisingTrajectory, k: usize) -> Result<f64> {
    let mut g = Graph::new(params);
    let (lp, _) = step_logprob_node(&mut g, field, traj, k)?;
    Ok(g.scalar(lp))
}
