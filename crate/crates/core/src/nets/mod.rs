//! Trainable networks: dense, contracting/expansive convolution, max and
//! location-based pooling layers followed by a linear head, with exact
//! reverse-mode gradients.

mod arch;
mod dense;

pub use arch::{
    build_experiment_config, Architecture, BiasScheme, Body, ExperimentConfig, ExperimentName,
    TargetKind, TestVariant, EXPERIMENT_DIM, EXPERIMENT_S, LEARNING_DEPTH, NOISE_STD, NOISY_DEPTH,
    SWEEP_SIZES,
};
pub use dense::{DenseLayer, DenseNet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::convops::{BiasMode, ConvKind, ConvLayerKind};
use crate::error::{invalid, Result};

/// A parameter tensor with its trainability flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub values: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn trainable(values: Vec<f64>) -> Self {
        Self {
            values,
            trainable: true,
        }
    }

    pub fn frozen(values: Vec<f64>) -> Self {
        Self {
            values,
            trainable: false,
        }
    }

    /// Uniform in `[−√(1/fan_in), √(1/fan_in)]`.
    pub fn fan_in_uniform<R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Self {
        let a = (1.0 / fan_in.max(1) as f64).sqrt();
        Self::trainable((0..len).map(|_| rng.gen_range(-a..=a)).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        rows: usize,
        cols: usize,
        /// Row-major `rows × cols`.
        weights: Param,
        bias: Option<Param>,
        activated: bool,
    },
    Conv {
        kind: ConvLayerKind,
        filter: Param,
        /// Empty for `BiasMode::None`, one entry for `ScalarShared`, the output width for `FullVector`.
        bias: Param,
    },
    /// Non-overlapping windows of `size`; ties go to the first maximal index.
    MaxPool { size: usize },
    /// Location-based pooling, see [`crate::primitives::PoolingSpec`].
    LocationPool {
        stride: usize,
        offset: usize,
        output_len: usize,
    },
}

impl Layer {
    pub fn output_len(&self, input_len: usize) -> Result<usize> {
        match self {
            Layer::Dense { rows, cols, .. } => {
                if *cols != input_len {
                    return invalid(format!("dense layer expects width {cols}, got {input_len}"));
                }
                Ok(*rows)
            }
            Layer::Conv { kind, filter, .. } => {
                let s = filter.len().saturating_sub(1);
                kind.tag.output_len(input_len, s).ok_or_else(|| {
                    crate::Error::InvalidArgument(format!(
                        "contracting layer with s={s} cannot act on width {input_len}"
                    ))
                })
            }
            Layer::MaxPool { size } => {
                if *size == 0 || input_len < *size {
                    return invalid(format!("max pooling of size {size} on width {input_len}"));
                }
                Ok(input_len / size)
            }
            Layer::LocationPool {
                stride,
                offset,
                output_len,
            } => {
                if *stride == 0 || *offset > input_len {
                    return invalid("invalid location pooling parameters");
                }
                Ok(*output_len)
            }
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Dense { weights, bias, .. } => {
                std::iter::once(weights).chain(bias.as_ref()).collect()
            }
            Layer::Conv { filter, bias, .. } => vec![filter, bias],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Dense { weights, bias, .. } => {
                std::iter::once(weights).chain(bias.as_mut()).collect()
            }
            Layer::Conv { filter, bias, .. } => vec![filter, bias],
            _ => Vec::new(),
        }
    }
}

/// Trainable-parameter count split into feature extractor and head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub features: usize,
    pub head: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.features + self.head
    }
}

/// A feed-forward network `x ↦ a · V(x)`, or the feature map `V` alone when
/// there is no head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    pub head: Option<Param>,
}

/// Cached activations of one forward pass, reused across samples.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    /// `acts[l]` is the input of layer `l`; the last entry is the feature vector.
    acts: Vec<Vec<f64>>,
    /// Pre-activation values of activated layers.
    pre: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
    grad_a: Vec<f64>,
    grad_b: Vec<f64>,
}

impl Tape {
    pub fn features(&self) -> &[f64] {
        self.acts.last().map_or(&[], Vec::as_slice)
    }

    /// Smallest `|z|` over nonzero ReLU pre-activations of the last pass, i.e.
    /// how far the pass is from a point where the network is not differentiable.
    pub fn min_nonzero_preactivation(&self) -> f64 {
        self.pre
            .iter()
            .flatten()
            .filter(|z| **z != 0.0)
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

/// Gradient buffers aligned with [`Network::params`].
pub type Grads = Vec<Vec<f64>>;

impl Network {
    /// Widths `d_0, d_1, …, d_L` of the layer chain.
    pub fn widths(&self) -> Result<Vec<usize>> {
        let mut widths = vec![self.input_dim];
        for (i, layer) in self.layers.iter().enumerate() {
            let w = layer
                .output_len(*widths.last().unwrap())
                .map_err(|e| crate::Error::InvalidArgument(format!("layer {}: {e}", i + 1)))?;
            widths.push(w);
        }
        Ok(widths)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        Ok(*self.widths()?.last().unwrap())
    }

    /// Checks the width chain and every parameter tensor's shape.
    pub fn validate(&self) -> Result<()> {
        let widths = self.widths()?;
        for (i, layer) in self.layers.iter().enumerate() {
            let out = widths[i + 1];
            match layer {
                Layer::Dense {
                    rows,
                    cols,
                    weights,
                    bias,
                    ..
                } => {
                    if weights.len() != rows * cols {
                        return invalid(format!("layer {}: weights have wrong size", i + 1));
                    }
                    if bias.as_ref().is_some_and(|b| b.len() != *rows) {
                        return invalid(format!("layer {}: bias has wrong size", i + 1));
                    }
                }
                Layer::Conv { kind, filter, bias } => {
                    if filter.len() < 2 {
                        return invalid(format!("layer {}: filter needs s >= 1", i + 1));
                    }
                    let expected = match kind.bias_mode {
                        BiasMode::None => 0,
                        BiasMode::ScalarShared => 1,
                        BiasMode::FullVector => out,
                    };
                    if bias.len() != expected {
                        return invalid(format!(
                            "layer {}: bias has {} entries, {:?} needs {expected}",
                            i + 1,
                            bias.len(),
                            kind.bias_mode
                        ));
                    }
                }
                _ => {}
            }
        }
        if let Some(head) = &self.head {
            if head.len() != *widths.last().unwrap() {
                return invalid(format!(
                    "head has {} weights for feature width {}",
                    head.len(),
                    widths.last().unwrap()
                ));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(Layer::params)
            .chain(self.head.as_ref())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let head = self.head.as_mut();
        self.layers
            .iter_mut()
            .flat_map(Layer::params_mut)
            .chain(head)
            .collect()
    }

    pub fn zero_grads(&self) -> Grads {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn freeze(&mut self) {
        for p in self.params_mut() {
            p.trainable = false;
        }
    }

    /// Feature map `V(x)`.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::default();
        self.run(x, &mut tape)?;
        Ok(tape.features().to_vec())
    }

    /// Scalar output `a · V(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        let mut tape = Tape::default();
        self.forward_taped(x, &mut tape)
    }

    /// Forward pass recording everything [`Network::backward`] needs.
    pub fn forward_taped(&self, x: &[f64], tape: &mut Tape) -> Result<f64> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| crate::Error::InvalidArgument("network has no output head".into()))?;
        self.run(x, tape)?;
        Ok(dot(&head.values, tape.features()))
    }

    fn run(&self, x: &[f64], tape: &mut Tape) -> Result<()> {
        if x.len() != self.input_dim {
            return invalid(format!(
                "network expects input of length {}, got {}",
                self.input_dim,
                x.len()
            ));
        }
        let n = self.layers.len();
        tape.acts.resize_with(n + 1, Vec::new);
        tape.pre.resize_with(n, Vec::new);
        tape.argmax.resize_with(n, Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(x);

        for (l, layer) in self.layers.iter().enumerate() {
            let (inputs, rest) = tape.acts.split_at_mut(l + 1);
            let h = &inputs[l];
            let out = &mut rest[0];
            let out_len = layer.output_len(h.len())?;
            out.clear();
            out.resize(out_len, 0.0);
            match layer {
                Layer::Dense {
                    cols,
                    weights,
                    bias,
                    activated,
                    ..
                } => {
                    for (j, o) in out.iter_mut().enumerate() {
                        let row = &weights.values[j * cols..(j + 1) * cols];
                        *o = dot(row, h) + bias.as_ref().map_or(0.0, |b| b.values[j]);
                    }
                    if *activated {
                        relu_in_place(out, &mut tape.pre[l]);
                    }
                }
                Layer::Conv { kind, filter, bias } => {
                    match kind.tag {
                        ConvKind::Expansive => {
                            crate::convops::expansive_into(&filter.values, h, out)
                        }
                        ConvKind::Contracting => {
                            crate::convops::contracting_into(&filter.values, h, out)
                        }
                    }
                    match kind.bias_mode {
                        BiasMode::None => {}
                        BiasMode::ScalarShared => {
                            let b = bias.values[0];
                            out.iter_mut().for_each(|o| *o += b);
                        }
                        BiasMode::FullVector => {
                            out.iter_mut().zip(&bias.values).for_each(|(o, b)| *o += b)
                        }
                    }
                    if kind.activated {
                        relu_in_place(out, &mut tape.pre[l]);
                    }
                }
                Layer::MaxPool { size } => {
                    let arg = &mut tape.argmax[l];
                    arg.clear();
                    for (i, o) in out.iter_mut().enumerate() {
                        let window = &h[i * size..(i + 1) * size];
                        let mut best = 0;
                        for (k, &v) in window.iter().enumerate() {
                            if v > window[best] {
                                best = k;
                            }
                        }
                        *o = window[best];
                        arg.push(i * size + best);
                    }
                }
                Layer::LocationPool { stride, offset, .. } => {
                    for (k, o) in out.iter_mut().enumerate() {
                        let idx = (k + 1) * stride + offset;
                        *o = if idx >= 1 && idx <= h.len() { h[idx - 1] } else { 0.0 };
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulates `upstream · ∂output/∂θ` into `grads` for the pass recorded on `tape`.
    pub fn backward(&self, tape: &mut Tape, upstream: f64, grads: &mut Grads) {
        let head = self.head.as_ref().expect("backward needs a head");
        let n_layer_params: usize = self.layers.iter().map(|l| l.params().len()).sum();
        let feats = tape.acts.last().expect("forward pass recorded");
        for (g, f) in grads[n_layer_params].iter_mut().zip(feats) {
            *g += upstream * f;
        }
        let mut grad = std::mem::take(&mut tape.grad_a);
        let mut next = std::mem::take(&mut tape.grad_b);
        grad.clear();
        grad.extend(head.values.iter().map(|a| upstream * a));

        let mut slot = n_layer_params;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let h = &tape.acts[l];
            slot -= layer.params().len();
            next.clear();
            next.resize(h.len(), 0.0);
            match layer {
                Layer::Dense {
                    cols,
                    weights,
                    bias,
                    activated,
                    ..
                } => {
                    if *activated {
                        mask_relu(&mut grad, &tape.pre[l]);
                    }
                    for (j, &gz) in grad.iter().enumerate() {
                        if gz == 0.0 {
                            continue;
                        }
                        let row = &weights.values[j * cols..(j + 1) * cols];
                        let gw = &mut grads[slot][j * cols..(j + 1) * cols];
                        for k in 0..*cols {
                            gw[k] += gz * h[k];
                            next[k] += gz * row[k];
                        }
                    }
                    if bias.is_some() {
                        for (gb, gz) in grads[slot + 1].iter_mut().zip(&grad) {
                            *gb += gz;
                        }
                    }
                }
                Layer::Conv { kind, filter, .. } => {
                    if kind.activated {
                        mask_relu(&mut grad, &tape.pre[l]);
                    }
                    let w = &filter.values;
                    let s = w.len() - 1;
                    let gw = &mut grads[slot];
                    match kind.tag {
                        ConvKind::Expansive => {
                            for (k, &hk) in h.iter().enumerate() {
                                let mut acc = 0.0;
                                for t in 0..=s {
                                    let gz = grad[k + t];
                                    gw[t] += gz * hk;
                                    acc += w[t] * gz;
                                }
                                next[k] = acc;
                            }
                        }
                        ConvKind::Contracting => {
                            for (i, &gz) in grad.iter().enumerate() {
                                if gz == 0.0 {
                                    continue;
                                }
                                for t in 0..=s {
                                    let src = i + s - t;
                                    gw[t] += gz * h[src];
                                    next[src] += w[t] * gz;
                                }
                            }
                        }
                    }
                    match kind.bias_mode {
                        BiasMode::None => {}
                        BiasMode::ScalarShared => grads[slot + 1][0] += grad.iter().sum::<f64>(),
                        BiasMode::FullVector => {
                            for (gb, gz) in grads[slot + 1].iter_mut().zip(&grad) {
                                *gb += gz;
                            }
                        }
                    }
                }
                Layer::MaxPool { .. } => {
                    for (&src, &g) in tape.argmax[l].iter().zip(&grad) {
                        next[src] += g;
                    }
                }
                Layer::LocationPool { stride, offset, .. } => {
                    for (k, &g) in grad.iter().enumerate() {
                        let idx = (k + 1) * stride + offset;
                        if idx >= 1 && idx <= h.len() {
                            next[idx - 1] += g;
                        }
                    }
                }
            }
            std::mem::swap(&mut grad, &mut next);
        }
        tape.grad_a = grad;
        tape.grad_b = next;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn relu_in_place(out: &mut [f64], pre: &mut Vec<f64>) {
    pre.clear();
    pre.extend_from_slice(out);
    out.iter_mut().for_each(|o| *o = o.max(0.0));
}

fn mask_relu(grad: &mut [f64], pre: &[f64]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Trainable scalars, split into feature extractor and head.
pub fn count_parameters(net: &Network) -> ParamCount {
    let count = |ps: &[&Param]| ps.iter().filter(|p| p.trainable).map(|p| p.len()).sum();
    let features: Vec<&Param> = net.layers.iter().flat_map(Layer::params).collect();
    ParamCount {
        features: count(&features),
        head: net.head.as_ref().map_or(0, |h| count(&[h])),
    }
}

/// Convolution layer with fan-in initialised filter and zero bias.
pub fn conv_layer<R: Rng + ?Sized>(
    tag: ConvKind,
    s: usize,
    bias_mode: BiasMode,
    activated: bool,
    output_len: usize,
    rng: &mut R,
) -> Layer {
    let bias = match bias_mode {
        BiasMode::None => Param::trainable(Vec::new()),
        BiasMode::ScalarShared => Param::trainable(vec![0.0]),
        BiasMode::FullVector => Param::trainable(vec![0.0; output_len]),
    };
    Layer::Conv {
        kind: ConvLayerKind {
            tag,
            bias_mode,
            activated,
        },
        filter: Param::fan_in_uniform(s + 1, s + 1, rng),
        bias,
    }
}

pub fn dense_layer<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    with_bias: bool,
    activated: bool,
    rng: &mut R,
) -> Layer {
    Layer::Dense {
        rows,
        cols,
        weights: Param::fan_in_uniform(rows * cols, cols, rng),
        bias: with_bias.then(|| Param::trainable(vec![0.0; rows])),
        activated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net(rng: &mut ChaCha8Rng) -> Network {
        let layers = vec![
            conv_layer(ConvKind::Expansive, 2, BiasMode::ScalarShared, true, 8, rng),
            conv_layer(ConvKind::Contracting, 2, BiasMode::FullVector, true, 6, rng),
            Layer::MaxPool { size: 2 },
            dense_layer(4, 3, true, true, rng),
        ];
        let mut net = Network {
            input_dim: 6,
            layers,
            head: None,
        };
        net.head = Some(Param::fan_in_uniform(4, 4, rng));
        net
    }

    #[test]
    fn widths_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = tiny_net(&mut rng);
        assert_eq!(net.widths().unwrap(), vec![6, 8, 6, 3, 4]);
        net.validate().unwrap();
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = tiny_net(&mut rng);
        for p in net.params_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(net.forward(&[0.3, -1.0, 2.0, 0.5, 0.1, 0.9]).unwrap(), 0.0);
    }

    #[test]
    fn head_gradient_is_the_feature_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = tiny_net(&mut rng);
        let x = [0.3, -1.0, 2.0, 0.5, 0.1, 0.9];
        let mut tape = Tape::default();
        net.forward_taped(&x, &mut tape).unwrap();
        let feats = tape.features().to_vec();
        let mut grads = net.zero_grads();
        net.backward(&mut tape, 1.0, &mut grads);
        assert_eq!(grads.last().unwrap(), &feats);
    }

    #[test]
    fn shared_bias_gradient_sums_per_coordinate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shared = tiny_net(&mut rng);
        let mut full = shared.clone();
        let b = if let Layer::Conv { bias, .. } = &shared.layers[0] {
            bias.values[0]
        } else {
            unreachable!()
        };
        if let Layer::Conv { kind, bias, .. } = &mut full.layers[0] {
            kind.bias_mode = BiasMode::FullVector;
            *bias = Param::trainable(vec![b; 8]);
        }
        let x = [0.3, 1.0, 2.0, 0.5, 0.1, 0.9];
        let mut grads_s = shared.zero_grads();
        let mut grads_f = full.zero_grads();
        let mut tape = Tape::default();
        shared.forward_taped(&x, &mut tape).unwrap();
        shared.backward(&mut tape, 1.0, &mut grads_s);
        full.forward_taped(&x, &mut tape).unwrap();
        full.backward(&mut tape, 1.0, &mut grads_f);
        let summed: f64 = grads_f[1].iter().sum();
        assert!((grads_s[1][0] - summed).abs() < 1e-14);
    }

    #[test]
    fn max_pool_ties_route_to_first_index() {
        let net = Network {
            input_dim: 4,
            layers: vec![Layer::MaxPool { size: 2 }],
            head: Some(Param::trainable(vec![1.0, 1.0])),
        };
        let mut tape = Tape::default();
        net.forward_taped(&[1.0, 1.0, 0.0, 2.0], &mut tape).unwrap();
        assert_eq!(tape.argmax[0], vec![0, 3]);
    }

    #[test]
    fn count_with_and_without_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network {
            input_dim: 30,
            layers: vec![dense_layer(10, 30, false, true, &mut rng)],
            head: None,
        };
        assert_eq!(count_parameters(&net).total(), 300);
        let empty = Network {
            input_dim: 7,
            layers: vec![],
            head: Some(Param::trainable(vec![0.0; 7])),
        };
        assert_eq!(count_parameters(&empty).total(), 7);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = tiny_net(&mut rng);
        assert!(net.forward(&[1.0; 5]).is_err());
    }
}
