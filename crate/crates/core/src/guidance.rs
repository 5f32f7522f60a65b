//! Repulsive diversity guidance for a group of concurrent latent trajectories.
//!
//! At each denoising step the group's median pairwise distance sets the
//! kernel bandwidth `σ`, and each member feels
//!
//! ```text
//! F(z_n) = Σ_{n'≠n} 2 (1 - d²/2σ²) exp(-d²/2σ²) (z_n - z_n'),   d = ‖z_n - z_n'‖
//! ```
//!
//! scaled by `γ_t = γ_max · t/K`, so the push fades as denoising finishes.
//! The coefficient changes sign at `d = √2·σ`: pairs farther apart than that
//! are weakly attracted, exactly as the formula is written.
//!
//! The offset added to a transition mean is `γ_t · Δt · F(z_n) / (N - 1)`:
//! the force acts as a drift over one step and is averaged over neighbours.
//! Summed and applied in full at every step, a group of 16 standard-normal
//! points spreads to pairwise distances near 10⁵ within ten steps.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub enabled: bool,
    pub gamma_max: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            gamma_max: 0.8,
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Median of all pairwise Euclidean distances. `None` for fewer than two
/// points or when every point coincides (σ = 0).
pub fn bandwidth<L: AsRef<[f64]>>(latents: &[L]) -> Option<f64> {
    let n = latents.len();
    if n < 2 {
        return None;
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(distance(latents[i].as_ref(), latents[j].as_ref()));
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    (median > 0.0).then_some(median)
}

/// Interaction force on member `n` of the group.
pub fn repulsion_force<L: AsRef<[f64]>>(latents: &[L], n: usize, sigma: f64) -> Vec<f64> {
    let zn = latents[n].as_ref();
    let mut force = vec![0.0; zn.len()];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (m, other) in latents.iter().enumerate() {
        if m == n {
            continue;
        }
        let zm = other.as_ref();
        let d2: f64 = zn.iter().zip(zm).map(|(a, b)| (a - b) * (a - b)).sum();
        let u = d2 * inv;
        let coef = 2.0 * (1.0 - u) * (-u).exp();
        for ((f, a), b) in force.iter_mut().zip(zn).zip(zm) {
            *f += coef * (a - b);
        }
    }
    force
}

/// Guidance scale at step time index `t_index` (K at pure noise, 0 at data).
pub fn guidance_scale(cfg: &GuidanceConfig, t_index: usize, steps: usize) -> f64 {
    cfg.gamma_max * t_index as f64 / steps as f64
}

/// Offset for member `n`: `γ_t · Δt · F(z_n) / (N - 1)` with `Δt = 1/steps`.
pub fn member_offset<L: AsRef<[f64]>>(latents: &[L], n: usize, sigma: f64, t_index: usize, steps: usize, cfg: &GuidanceConfig) -> Vec<f64> {
    let neighbours = latents.len().saturating_sub(1).max(1) as f64;
    let scale = guidance_scale(cfg, t_index, steps) / (steps as f64 * neighbours);
    repulsion_force(latents, n, sigma)
        .into_iter()
        .map(|f| scale * f)
        .collect()
}

/// Offsets for every member. All zeros when guidance is disabled or the
/// bandwidth is degenerate.
pub fn group_offsets<L: AsRef<[f64]>>(
    latents: &[L],
    t_index: usize,
    steps: usize,
    cfg: &GuidanceConfig,
) -> Vec<Vec<f64>> {
    match bandwidth(latents) {
        Some(sigma) if cfg.enabled => (0..latents.len())
            .map(|n| member_offset(latents, n, sigma, t_index, steps, cfg))
            .collect(),
        _ => latents
            .iter()
            .map(|z| vec![0.0; z.as_ref().len()])
            .collect(),
    }
}

/// Guided mean for member `n`, returned with its offset.
pub fn guided_update<L: AsRef<[f64]>>(
    base_mean: &[f64],
    latents: &[L],
    n: usize,
    t_index: usize,
    steps: usize,
    cfg: &GuidanceConfig,
) -> (Vec<f64>, Vec<f64>) {
    let offset = match bandwidth(latents) {
        Some(sigma) if cfg.enabled => member_offset(latents, n, sigma, t_index, steps, cfg),
        _ => vec![0.0; base_mean.len()],
    };
    let mean = base_mean.iter().zip(&offset).map(|(m, o)| m + o).collect();
    (mean, offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bandwidth_cases() {
        let collinear = [[0.0], [1.0], [3.0]];
        assert_eq!(bandwidth(&collinear), Some(2.0));
        assert_eq!(bandwidth(&[[0.0, 0.0], [2.0, 0.0]]), Some(2.0));
        assert_eq!(bandwidth(&[[1.0, 1.0]]), None);
        assert_eq!(bandwidth(&[[1.0], [1.0], [1.0]]), None);
    }

    #[test]
    fn bandwidth_matches_sorted_pairwise_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pts: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let mut d = vec![];
            for i in 0..4 {
                for j in 0..4 {
                    if i < j {
                        let s: f64 = (0..3).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum();
                        d.push(s.sqrt());
                    }
                }
            }
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(bandwidth(&pts).unwrap(), (d[2] + d[3]) / 2.0);
        }
    }

    #[test]
    fn single_member_feels_no_force() {
        assert_eq!(repulsion_force(&[[1.0, 2.0]], 0, 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn pair_force_hand_value() {
        let z = [[1.0, 0.0], [-1.0, 0.0]];
        let f = repulsion_force(&z, 0, 2.0);
        assert!((f[0] - 1.213_061_319_425_267).abs() < 1e-12);
        assert_eq!(f[1], 0.0);
        let g = repulsion_force(&z, 1, 2.0);
        assert_eq!(g[0], -f[0]);
    }

    #[test]
    fn coefficient_vanishes_at_root_two_sigma() {
        let sigma = 1.5;
        let d = 2f64.sqrt() * sigma;
        let f = repulsion_force(&[[0.0], [d]], 0, sigma);
        assert!(f[0].abs() < 1e-15);
        let close = repulsion_force(&[[0.0], [0.9 * d]], 0, sigma);
        assert!(close[0] < 0.0, "member 0 should be pushed away from member 1");
    }

    #[test]
    fn scale_endpoints() {
        let cfg = GuidanceConfig::default();
        assert_eq!(guidance_scale(&cfg, 0, 10), 0.0);
        assert_eq!(guidance_scale(&cfg, 10, 10), 0.8);
        let z = [[1.0, 0.0], [-1.0, 0.0]];
        let (mean, off) = guided_update(&[5.0, 5.0], &z, 0, 0, 10, &cfg);
        assert_eq!(mean, vec![5.0, 5.0]);
        assert_eq!(off, vec![0.0, 0.0]);
    }

    #[test]
    fn mid_schedule_pair_offset() {
        // Pair at distance 2 has σ = 2 and F = [1.21306, 0]; one neighbour,
        // γ = 0.8·5/10 = 0.4, Δt = 0.1.
        let cfg = GuidanceConfig::default();
        let z = [[1.0, 0.0], [-1.0, 0.0]];
        let (mean, off) = guided_update(&[5.0, 5.0], &z, 0, 5, 10, &cfg);
        assert!((off[0] - 0.04 * 1.213_061_319_425_267).abs() < 1e-15);
        assert_eq!(mean[0], 5.0 + off[0]);
        assert_eq!(off[1], 0.0);
    }

    #[test]
    fn neighbour_average_divides_the_summed_force() {
        let cfg = GuidanceConfig::default();
        let z = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.7, 0.9]];
        let sigma = bandwidth(&z).unwrap();
        let f = repulsion_force(&z, 2, sigma);
        let off = &group_offsets(&z, 10, 10, &cfg)[2];
        for (o, f) in off.iter().zip(&f) {
            assert!((o - 0.8 * 0.1 * f / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sixteen_member_group_stays_bounded() {
        use crate::numcore::{normal_vec, seeded_rng};
        let cfg = GuidanceConfig::default();
        let mut rng = seeded_rng(0);
        let mut xs: Vec<Vec<f64>> = (0..16).map(|_| normal_vec(&mut rng, 2)).collect();
        let start = bandwidth(&xs).unwrap();
        for k in 0..10 {
            let offs = group_offsets(&xs, 10 - k, 10, &cfg);
            for (x, o) in xs.iter_mut().zip(offs) {
                for (a, b) in x.iter_mut().zip(o) {
                    *a += b;
                }
            }
        }
        let end = bandwidth(&xs).unwrap();
        assert!(end > start && end < 2.0 * start, "{start} -> {end}");
    }

    proptest! {
        #[test]
        fn offsets_preserve_the_centroid(
            pts in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 2..10),
            t in 0usize..=10,
        ) {
            let offs = group_offsets(&pts, t, 10, &GuidanceConfig::default());
            for k in 0..4 {
                let s: f64 = offs.iter().map(|o| o[k]).sum();
                prop_assert!(s.abs() < 1e-9);
            }
        }
    }
}
