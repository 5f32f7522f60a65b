use crate::error::{config_err, Result};

/// `(R - mean) / max(std, floor)` with the population standard deviation.
/// A group of identical rewards gets exactly zero advantages.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return config_err(format!("a group needs at least two rewards, got {}", rewards.len()));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(std_floor);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Standardized row means of an `N × M` reward matrix.
pub fn latent_advantages(rewards: &[Vec<f64>], std_floor: f64) -> Result<Vec<f64>> {
    let means: Vec<f64> = rewards.iter().map(|row| row_mean(row)).collect();
    group_advantages(&means, std_floor)
}

/// Each row standardized on its own.
pub fn text_local_advantages(rewards: &[Vec<f64>], std_floor: f64) -> Result<Vec<Vec<f64>>> {
    rewards.iter().map(|row| group_advantages(row, std_floor)).collect()
}

pub fn row_mean(row: &[f64]) -> f64 {
    if row.is_empty() {
        0.0
    } else {
        row.iter().sum::<f64>() / row.len() as f64
    }
}

/// Population standard deviation (0 for fewer than two values).
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}
