use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Layer, Network, Param};
use crate::error::{invalid, Result};
use crate::primitives::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    #[serde(default = "yes")]
    pub activated: bool,
}

fn yes() -> bool {
    true
}

/// `x ↦ a · σ(W^L ⋯ σ(W^1 x + b^1) ⋯ + b^L)`; the head is optional so that a
/// bare feature map can be compiled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub input_dim: usize,
    pub layers: Vec<DenseLayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<Vec<f64>>,
}

impl DenseNet {
    /// Random ReLU network with fan-in uniform weights and biases in `[−bias_scale, bias_scale]`.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        widths: &[usize],
        bias_scale: f64,
        with_head: bool,
        rng: &mut R,
    ) -> Self {
        let mut prev = input_dim;
        let mut layers = Vec::with_capacity(widths.len());
        for &w in widths {
            let a = (1.0 / prev as f64).sqrt();
            let weights = Matrix::from_fn(w, prev, |_, _| rng.gen_range(-a..=a));
            let bias = (0..w)
                .map(|_| {
                    if bias_scale > 0.0 {
                        rng.gen_range(-bias_scale..=bias_scale)
                    } else {
                        0.0
                    }
                })
                .collect();
            layers.push(DenseLayer {
                weights,
                bias,
                activated: true,
            });
            prev = w;
        }
        let head = with_head.then(|| {
            let a = (1.0 / prev as f64).sqrt();
            (0..prev).map(|_| rng.gen_range(-a..=a)).collect()
        });
        Self {
            input_dim,
            layers,
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return invalid("dense network needs a positive input dimension");
        }
        let mut width = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weights.cols() != width {
                return invalid(format!(
                    "layer {}: weight matrix has {} columns, expected {width}",
                    i + 1,
                    layer.weights.cols()
                ));
            }
            if layer.bias.len() != layer.weights.rows() {
                return invalid(format!(
                    "layer {}: bias has {} entries for {} rows",
                    i + 1,
                    layer.bias.len(),
                    layer.weights.rows()
                ));
            }
            width = layer.weights.rows();
        }
        if let Some(head) = &self.head {
            if head.len() != width {
                return invalid(format!("head has {} weights for width {width}", head.len()));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.weights.rows())
    }

    /// Hidden representation after the last layer.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return invalid(format!(
                "dense network expects input of length {}, got {}",
                self.input_dim,
                x.len()
            ));
        }
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.weights.mul_vec(&h)?;
            for (v, b) in h.iter_mut().zip(&layer.bias) {
                *v += b;
                if layer.activated {
                    *v = v.max(0.0);
                }
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| crate::Error::InvalidArgument("dense network has no head".into()))?;
        Ok(self.features(x)?.iter().zip(head).map(|(h, a)| h * a).sum())
    }

    /// `Σ d_ℓ(d_{ℓ−1} + 1)` plus the head size.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * (l.weights.cols() + 1))
            .sum::<usize>()
            + self.head.as_ref().map_or(0, Vec::len)
    }

    /// Trainable copy with every tensor flagged trainable.
    pub fn to_network(&self) -> Result<Network> {
        self.validate()?;
        let layers = self
            .layers
            .iter()
            .map(|l| Layer::Dense {
                rows: l.weights.rows(),
                cols: l.weights.cols(),
                weights: Param::trainable(l.weights.as_slice().to_vec()),
                bias: Some(Param::trainable(l.bias.clone())),
                activated: l.activated,
            })
            .collect();
        Ok(Network {
            input_dim: self.input_dim,
            layers,
            head: self.head.clone().map(Param::trainable),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(s)?;
        net.validate()?;
        Ok(net)
    }
}
