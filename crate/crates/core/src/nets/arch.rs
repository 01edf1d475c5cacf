//! The network families compared in the toy experiments and the experiment
//! presets that pair them with a data source.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{conv_layer, dense_layer, Layer, Network, Param};
use crate::convops::{BiasMode, ConvKind};
use crate::error::{invalid, Result};
use crate::train::{Formula, Generator, InputLayout, SupportPosition};

/// Filter length 3 throughout the experiments.
pub const EXPERIMENT_S: usize = 2;
pub const EXPERIMENT_DIM: usize = 30;
const FC_UNITS: usize = 10;
const BLOCK_LAYERS: usize = 5;
const TARGET_DEPTH: usize = 5;
const TARGET_BIAS: f64 = 0.01;
/// Output scale of the random target networks.
pub const TARGET_STD: f64 = 1.0;

/// How convolution biases are parameterised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasScheme {
    /// A full trainable vector on every layer.
    Trainable,
    /// No trainable bias.
    Fixed,
    /// One shared scalar per hidden layer and a full vector on the last layer.
    Shared,
}

impl BiasScheme {
    fn mode(self, layer: usize, depth: usize) -> BiasMode {
        match self {
            BiasScheme::Trainable => BiasMode::FullVector,
            BiasScheme::Fixed => BiasMode::None,
            BiasScheme::Shared if layer + 1 == depth => BiasMode::FullVector,
            BiasScheme::Shared => BiasMode::ScalarShared,
        }
    }

    pub fn letter(self) -> &'static str {
        match self {
            BiasScheme::Trainable => "T",
            BiasScheme::Fixed => "F",
            BiasScheme::Shared => "S",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Body {
    /// `layers` dense ReLU layers of `units` each.
    Fc { layers: usize, units: usize, bias: bool },
    /// Blocks of five length-3 convolutions; only the last layer of a block has
    /// a (shared) bias and ReLU. Expansive blocks are followed by max pooling
    /// of 4 then 2 so every block ends at width 10 like the fc baselines.
    MultiConv { tag: ConvKind, blocks: usize },
    /// `depth` activated convolution layers, optionally followed by max
    /// pooling and/or one square dense layer.
    Conv {
        tag: ConvKind,
        depth: usize,
        bias: BiasScheme,
        max_pool: Option<usize>,
        dense_after: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub body: Body,
}

impl Architecture {
    pub fn dfcn(depth: usize) -> Self {
        Self {
            name: "DFCN".into(),
            body: Body::Fc {
                layers: depth,
                units: FC_UNITS,
                bias: true,
            },
        }
    }

    pub fn fc_baseline(layers: usize) -> Self {
        Self {
            name: format!("{layers}-layer fc"),
            body: Body::Fc {
                layers,
                units: FC_UNITS,
                bias: false,
            },
        }
    }

    pub fn multi_conv(tag: ConvKind, blocks: usize) -> Self {
        Self {
            name: format!("{blocks}-block multi-conv {}", family(tag)),
            body: Body::MultiConv { tag, blocks },
        }
    }

    pub fn conv(tag: ConvKind, depth: usize, bias: BiasScheme) -> Self {
        Self {
            name: family(tag).into(),
            body: Body::Conv {
                tag,
                depth,
                bias,
                max_pool: None,
                dense_after: false,
            },
        }
    }

    /// cDCNN+fc.
    pub fn conv_fc(tag: ConvKind, depth: usize) -> Self {
        Self {
            name: format!("{}+fc", family(tag)),
            body: Body::Conv {
                tag,
                depth,
                bias: BiasScheme::Shared,
                max_pool: None,
                dense_after: true,
            },
        }
    }

    /// eDCNN+pl.
    pub fn conv_pool(tag: ConvKind, depth: usize) -> Self {
        Self {
            name: format!("{}+pl", family(tag)),
            body: Body::Conv {
                tag,
                depth,
                bias: BiasScheme::Shared,
                max_pool: Some(2),
                dense_after: false,
            },
        }
    }

    /// The five learning architectures at a common depth.
    pub fn learning_suite(depth: usize) -> Vec<Self> {
        vec![
            Self::dfcn(depth),
            Self::conv(ConvKind::Contracting, depth, BiasScheme::Shared),
            Self::conv_fc(ConvKind::Contracting, depth),
            Self::conv(ConvKind::Expansive, depth, BiasScheme::Shared),
            Self::conv_pool(ConvKind::Expansive, depth),
        ]
    }

    /// Number of weight layers, as reported in result tables.
    pub fn depth(&self) -> usize {
        match &self.body {
            Body::Fc { layers, .. } => *layers,
            Body::MultiConv { blocks, .. } => blocks * BLOCK_LAYERS,
            Body::Conv { depth, .. } => *depth,
        }
    }

    /// Fresh network with fan-in uniform weights, zero biases and a head.
    pub fn build<R: Rng + ?Sized>(&self, input_dim: usize, rng: &mut R) -> Result<Network> {
        let mut layers = Vec::new();
        let mut width = input_dim;
        match &self.body {
            Body::Fc {
                layers: n,
                units,
                bias,
            } => {
                for _ in 0..*n {
                    layers.push(dense_layer(*units, width, *bias, true, rng));
                    width = *units;
                }
            }
            Body::MultiConv { tag, blocks } => {
                for b in 0..*blocks {
                    for l in 0..BLOCK_LAYERS {
                        let last = l + 1 == BLOCK_LAYERS;
                        width = conv_width(*tag, width, layers.len() + 1)?;
                        let mode = if last {
                            BiasMode::ScalarShared
                        } else {
                            BiasMode::None
                        };
                        layers.push(conv_layer(*tag, EXPERIMENT_S, mode, last, width, rng));
                    }
                    if *tag == ConvKind::Expansive {
                        let size = if b == 0 { 4 } else { 2 };
                        layers.push(Layer::MaxPool { size });
                        width /= size;
                    }
                }
            }
            Body::Conv {
                tag,
                depth,
                bias,
                max_pool,
                dense_after,
            } => {
                for l in 0..*depth {
                    width = conv_width(*tag, width, l + 1)?;
                    let mode = bias.mode(l, *depth);
                    layers.push(conv_layer(*tag, EXPERIMENT_S, mode, true, width, rng));
                }
                if let Some(size) = max_pool {
                    if width < *size {
                        return invalid(format!("width {width} is too small for max pooling {size}"));
                    }
                    layers.push(Layer::MaxPool { size: *size });
                    width /= size;
                }
                if *dense_after {
                    layers.push(dense_layer(width, width, true, true, rng));
                }
            }
        }
        let net = Network {
            input_dim,
            layers,
            head: Some(Param::fan_in_uniform(width, width, rng)),
        };
        net.validate()?;
        Ok(net)
    }
}

fn family(tag: ConvKind) -> &'static str {
    match tag {
        ConvKind::Contracting => "cDCNN",
        ConvKind::Expansive => "eDCNN",
    }
}

fn conv_width(tag: ConvKind, width: usize, layer: usize) -> Result<usize> {
    tag.output_len(width, EXPERIMENT_S).ok_or_else(|| {
        crate::Error::InvalidArgument(format!(
            "contracting layer {layer} would shrink width {width} to zero (depth must stay below d/s)"
        ))
    })
}

/// Frozen random networks used as regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// 5-layer contracting network.
    F1,
    /// 5-layer expansive network.
    F2,
    /// 5-layer fully connected network.
    F3,
    /// `F1` with a shared bias of 0.01 after each convolution.
    F1m,
    /// `F2` with a shared bias of 0.01 after each convolution.
    F2m,
}

impl TargetKind {
    fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> Network {
        let mut layers = Vec::new();
        let mut width = EXPERIMENT_DIM;
        let (tag, biased) = match self {
            TargetKind::F1 => (Some(ConvKind::Contracting), false),
            TargetKind::F2 => (Some(ConvKind::Expansive), false),
            TargetKind::F1m => (Some(ConvKind::Contracting), true),
            TargetKind::F2m => (Some(ConvKind::Expansive), true),
            TargetKind::F3 => (None, false),
        };
        for _ in 0..TARGET_DEPTH {
            match tag {
                Some(tag) => {
                    width = tag.output_len(width, EXPERIMENT_S).expect("depth 5 fits width 30");
                    let mode = if biased {
                        BiasMode::ScalarShared
                    } else {
                        BiasMode::None
                    };
                    let mut layer = conv_layer(tag, EXPERIMENT_S, mode, true, width, rng);
                    if let Layer::Conv { bias, .. } = &mut layer {
                        bias.values.iter_mut().for_each(|b| *b = TARGET_BIAS);
                    }
                    layers.push(layer);
                }
                None => {
                    layers.push(dense_layer(FC_UNITS, width, false, true, rng));
                    width = FC_UNITS;
                }
            }
        }
        let mut net = Network {
            input_dim: EXPERIMENT_DIM,
            layers,
            head: Some(Param::fan_in_uniform(width, width, rng)),
        };
        net.freeze();
        net
    }

    /// Draws a frozen target from `seed`. Draws that are nearly constant, mostly
    /// zero or offset-dominated on the input distribution are rejected, and the
    /// head is rescaled so the output has standard deviation [`TARGET_STD`].
    pub fn instantiate(self, seed: u64) -> Network {
        const PROBES: usize = 512;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let mut net = self.draw(&mut rng);
            let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let ys: Vec<f64> = (0..PROBES)
                .map(|_| {
                    let x = InputLayout::Supported(SupportPosition::Random)
                        .sample(EXPERIMENT_DIM, &mut probe_rng);
                    net.forward(&x).expect("target dimensions are fixed")
                })
                .collect();
            let mean = ys.iter().sum::<f64>() / PROBES as f64;
            let std = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / PROBES as f64).sqrt();
            let zeros = ys.iter().filter(|y| y.abs() < 1e-12).count();
            if std > 1e-9 && zeros * 4 < PROBES && mean.abs() < 3.0 * std {
                let head = net.head.as_mut().expect("targets have a head");
                head.values.iter_mut().for_each(|a| *a *= TARGET_STD / std);
                return net;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    FitF1,
    FitF2,
    FitF3,
    F1m,
    F2m,
    LearnF1,
    LearnF2,
    LearnF3,
    ConsistencyF2,
    ConsistencyF3,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 10] = [
        ExperimentName::FitF1,
        ExperimentName::FitF2,
        ExperimentName::FitF3,
        ExperimentName::F1m,
        ExperimentName::F2m,
        ExperimentName::LearnF1,
        ExperimentName::LearnF2,
        ExperimentName::LearnF3,
        ExperimentName::ConsistencyF2,
        ExperimentName::ConsistencyF3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::FitF1 => "fit_f1",
            ExperimentName::FitF2 => "fit_f2",
            ExperimentName::FitF3 => "fit_f3",
            ExperimentName::F1m => "f1m",
            ExperimentName::F2m => "f2m",
            ExperimentName::LearnF1 => "learn_f1",
            ExperimentName::LearnF2 => "learn_f2",
            ExperimentName::LearnF3 => "learn_f3",
            ExperimentName::ConsistencyF2 => "consistency_f2",
            ExperimentName::ConsistencyF3 => "consistency_f3",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| crate::Error::InvalidArgument(format!("unknown experiment `{s}`")))
    }
}

/// A named held-out evaluation distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestVariant {
    pub label: String,
    pub layout: InputLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: ExperimentName,
    pub generator: Generator,
    pub input_dim: usize,
    pub train_layout: InputLayout,
    pub test_variants: Vec<TestVariant>,
    /// Training-set sizes; more than one entry makes a sweep.
    pub train_sizes: Vec<usize>,
    pub test_size: usize,
    pub noise_std: f64,
    pub architectures: Vec<Architecture>,
}

/// Default depth of the learning architectures.
pub const LEARNING_DEPTH: usize = 5;
/// Depth used for the noisy target.
pub const NOISY_DEPTH: usize = 6;
/// `σ` of the additive Gaussian noise (variance 0.01).
pub const NOISE_STD: f64 = 0.1;
pub const SWEEP_SIZES: [usize; 5] = [250, 500, 1000, 2000, 4000];

pub fn build_experiment_config(name: ExperimentName) -> ExperimentConfig {
    use ExperimentName::*;
    let random = InputLayout::Supported(SupportPosition::Random);
    let variant = |label: String, layout| TestVariant { label, layout };
    let single = |layout: InputLayout| vec![variant(name.as_str().to_string(), layout)];

    let (generator, train_layout, test_variants, train_sizes, test_size, noise_std, architectures) =
        match name {
            FitF1 | FitF2 | FitF3 => {
                let target = match name {
                    FitF1 => TargetKind::F1,
                    FitF2 => TargetKind::F2,
                    _ => TargetKind::F3,
                };
                let archs = vec![
                    Architecture::fc_baseline(1),
                    Architecture::multi_conv(ConvKind::Contracting, 1),
                    Architecture::multi_conv(ConvKind::Expansive, 1),
                    Architecture::fc_baseline(2),
                    Architecture::multi_conv(ConvKind::Contracting, 2),
                    Architecture::multi_conv(ConvKind::Expansive, 2),
                ];
                (Generator::Target(target), random, single(random), vec![900], 100, 0.0, archs)
            }
            F1m | F2m => {
                let target = if name == F1m {
                    TargetKind::F1m
                } else {
                    TargetKind::F2m
                };
                let depth = 4;
                let mut archs = vec![Architecture::dfcn(depth)];
                for tag in [ConvKind::Contracting, ConvKind::Expansive] {
                    for pool in [None, Some(2)] {
                        for bias in [BiasScheme::Trainable, BiasScheme::Fixed, BiasScheme::Shared] {
                            let tag_pool = if pool.is_some() { "W" } else { "W/o" };
                            archs.push(Architecture {
                                name: format!("{} {tag_pool}-{}", family(tag), bias.letter()),
                                body: Body::Conv {
                                    tag,
                                    depth,
                                    bias,
                                    max_pool: pool,
                                    dense_after: false,
                                },
                            });
                        }
                    }
                }
                let tests = vec![
                    variant(name.as_str().to_string(), random),
                    variant(
                        format!("{}_edge", name.as_str()),
                        InputLayout::Supported(SupportPosition::Edge),
                    ),
                ];
                (Generator::Target(target), random, tests, vec![900], 100, 0.0, archs)
            }
            LearnF1 => (
                Generator::Formula(Formula::F1),
                InputLayout::Dense,
                single(InputLayout::Dense),
                vec![1000],
                100,
                0.0,
                Architecture::learning_suite(LEARNING_DEPTH),
            ),
            LearnF2 => (
                Generator::Formula(Formula::F2),
                random,
                single(random),
                vec![1000],
                100,
                0.0,
                Architecture::learning_suite(LEARNING_DEPTH),
            ),
            LearnF3 => {
                let tests = [
                    ("beginning", SupportPosition::Beginning),
                    ("middle", SupportPosition::Middle),
                    ("end", SupportPosition::End),
                ]
                .into_iter()
                .map(|(p, pos)| variant(format!("learn_f3_{p}"), InputLayout::Supported(pos)))
                .collect();
                (
                    Generator::Formula(Formula::F3),
                    random,
                    tests,
                    vec![1000],
                    100,
                    NOISE_STD,
                    Architecture::learning_suite(NOISY_DEPTH),
                )
            }
            ConsistencyF2 => (
                Generator::Formula(Formula::F2),
                random,
                single(random),
                SWEEP_SIZES.to_vec(),
                500,
                0.0,
                Architecture::learning_suite(LEARNING_DEPTH),
            ),
            ConsistencyF3 => (
                Generator::Formula(Formula::F3),
                random,
                single(InputLayout::Supported(SupportPosition::Beginning)),
                SWEEP_SIZES.to_vec(),
                500,
                NOISE_STD,
                Architecture::learning_suite(NOISY_DEPTH),
            ),
        };
    ExperimentConfig {
        name,
        generator,
        input_dim: EXPERIMENT_DIM,
        train_layout,
        test_variants,
        train_sizes,
        test_size,
        noise_std,
        architectures,
    }
}
