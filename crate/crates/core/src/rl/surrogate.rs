use crate::numcore::{Graph, Var};

/// `min(r·A, clip(r, 1 - ε_low, 1 + ε_high)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the clip is active for this ratio.
pub fn is_clipped(ratio: f64, eps_low: f64, eps_high: f64) -> bool {
    ratio < 1.0 - eps_low || ratio > 1.0 + eps_high
}

/// Graph form of [`clipped_surrogate`] for a ratio node. At a tie the
/// gradient follows the unclipped branch.
pub fn surrogate_node(g: &mut Graph<'_>, ratio: Var, advantage: f64, eps_low: f64, eps_high: f64) -> Var {
    let ra = g.scale(ratio, advantage);
    let rc = g.clamp(ratio, 1.0 - eps_low, 1.0 + eps_high);
    let rca = g.scale(rc, advantage);
    g.min(ra, rca)
}

/// `exp(logp_new - logp_old)` as a node.
pub fn ratio_node(g: &mut Graph<'_>, logp_new: Var, logp_old: f64) -> Var {
    let d = g.shift(logp_new, -logp_old);
    g.exp(d)
}

/// `w_lat·L_latent + w_text·L_text`.
pub fn joint_loss(l_latent: f64, l_text: f64, w_lat: f64, w_text: f64) -> f64 {
    w_lat * l_latent + w_text * l_text
}

/// `α = w_lat / (w_lat + w_text)`.
pub fn balance_alpha(w_lat: f64, w_text: f64) -> f64 {
    w_lat / (w_lat + w_text)
}
