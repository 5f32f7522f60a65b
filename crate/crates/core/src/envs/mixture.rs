const TRUNCATE_BELOW: f64 = 1e-6;

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// 1 strictly inside the acceptance radius of any center, otherwise a
/// Gaussian falloff in the nearest squared distance, zeroed below 1e-6.
pub fn mixture_reward(point: [f64; 2], centers: &[[f64; 2]], radius: f64) -> f64 {
    if !point.iter().all(|x| x.is_finite()) {
        return 0.0;
    }
    let nearest = centers
        .iter()
        .map(|c| sq_dist(point, *c))
        .fold(f64::INFINITY, f64::min);
    if nearest < radius * radius {
        return 1.0;
    }
    let r = (-nearest / (2.0 * radius * radius)).exp();
    if r < TRUNCATE_BELOW {
        0.0
    } else {
        r
    }
}

/// Number of centers with at least one point strictly within `radius`.
pub fn mixture_mode_coverage(points: &[[f64; 2]], centers: &[[f64; 2]], radius: f64) -> usize {
    centers
        .iter()
        .filter(|c| points.iter().any(|p| sq_dist(*p, **c) < radius * radius))
        .count()
}
