use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `rows × cols` grid of latent values, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBlock {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl LatentBlock {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Config(format!(
                "latent block {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("latent block contains non-finite values".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Column means (pooled over the `rows` latent tokens).
    pub fn row_mean(&self) -> Vec<f64> {
        row_mean(&self.values, self.rows, self.cols)
    }
}

pub fn row_mean(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&values[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    let inv = 1.0 / rows as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// `(1 - t) x0 + t x1` with `x0` data and `x1` noise.
pub fn interpolate(x0: &LatentBlock, x1: &LatentBlock, t: f64) -> Result<LatentBlock> {
    if x0.rows != x1.rows || x0.cols != x1.cols {
        return Err(Error::Config("interpolate: shape mismatch".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("interpolation time {t} outside [0, 1]")));
    }
    let values = x0
        .values
        .iter()
        .zip(&x1.values)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Ok(LatentBlock {
        rows: x0.rows,
        cols: x0.cols,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(v: &[f64]) -> LatentBlock {
        LatentBlock::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn endpoints_and_blend() {
        let x0 = block(&[1.0, 1.0]);
        let x1 = block(&[0.0, 0.0]);
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
        assert_eq!(interpolate(&x0, &x1, 0.25).unwrap().values, vec![0.75, 0.75]);
    }

    #[test]
    fn out_of_range_time_is_a_domain_error() {
        let x = block(&[0.0]);
        assert!(matches!(interpolate(&x, &x, 1.5), Err(Error::Domain(_))));
        assert!(matches!(interpolate(&x, &x, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn row_mean_pools_tokens() {
        let b = LatentBlock::new(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(b.row_mean(), vec![2.0, 4.0]);
    }
}
