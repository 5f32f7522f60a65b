use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tape::{Graph, Var};
use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Fully connected network description. `activations[i]` follows layer `i`,
/// which maps `widths[i]` inputs to `widths[i + 1]` outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// Tanh hidden layers with a linear read-out.
    pub fn tanh_hidden(widths: Vec<usize>) -> Self {
        let layers = widths.len().saturating_sub(1);
        let mut activations = vec![Activation::Tanh; layers];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        Self {
            widths,
            activations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return config_err("an MLP needs at least one layer");
        }
        if self.widths.contains(&0) {
            return config_err("MLP widths must be positive");
        }
        if self.activations.len() != self.widths.len() - 1 {
            return config_err(format!(
                "{} layers but {} activations",
                self.widths.len() - 1,
                self.activations.len()
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Records the forward pass on `g`, reading weights from `offset`.
    pub fn forward(&self, g: &mut Graph<'_>, offset: usize, input: Var) -> Result<Var> {
        if g.value(input).len() != self.input_dim() {
            return config_err(format!(
                "MLP expects input of length {}, got {}",
                self.input_dim(),
                g.value(input).len()
            ));
        }
        let mut h = input;
        let mut cursor = offset;
        for (w, act) in self.widths.windows(2).zip(&self.activations) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bias = cursor + fan_in * fan_out;
            h = g.affine(h, cursor, bias, fan_out);
            if *act == Activation::Tanh {
                h = g.tanh(h);
            }
            cursor = bias + fan_out;
        }
        Ok(h)
    }

    /// Scaled-normal weights (1/sqrt(fan_in)), zero biases; the read-out
    /// layer is scaled by `out_scale`.
    pub fn init<R: Rng + ?Sized>(&self, out: &mut [f64], out_scale: f64, rng: &mut R) {
        assert_eq!(out.len(), self.param_count());
        let layers = self.widths.len() - 1;
        let mut cursor = 0;
        for (i, w) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = if i + 1 == layers { out_scale } else { 1.0 } / (fan_in as f64).sqrt();
            for x in &mut out[cursor..cursor + fan_in * fan_out] {
                let z: f64 = StandardNormal.sample(rng);
                *x = scale * z;
            }
            cursor += fan_in * fan_out;
            out[cursor..cursor + fan_out].fill(0.0);
            cursor += fan_out;
        }
    }
}

/// Plain forward evaluation of `spec` with parameters `params`.
pub fn mlp_forward(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return config_err(format!(
            "MLP needs {} parameters, got {}",
            spec.param_count(),
            params.len()
        ));
    }
    let mut g = Graph::new(params);
    let x = g.constant(input.to_vec());
    let y = spec.forward(&mut g, 0, x)?;
    Ok(g.value(y).to_vec())
}
