use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nets::{Network, TargetKind};
use crate::primitives::Matrix;

/// Length of the nonzero run in support-structured inputs.
pub const SUPPORT_LEN: usize = 5;

/// Where the five consecutive nonzero entries sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportPosition {
    /// Uniform over every admissible start.
    Random,
    /// Positions 1–5.
    Beginning,
    /// Positions 13–17.
    Middle,
    /// The last five positions.
    End,
    /// Beginning or end with equal probability.
    Edge,
}

impl SupportPosition {
    /// 1-based start of the run for dimension `d`.
    fn start<R: Rng + ?Sized>(self, d: usize, rng: &mut R) -> usize {
        let last = d - SUPPORT_LEN + 1;
        match self {
            SupportPosition::Random => rng.gen_range(1..=last),
            SupportPosition::Beginning => 1,
            SupportPosition::Middle => 13.min(last),
            SupportPosition::End => last,
            SupportPosition::Edge => {
                if rng.gen_bool(0.5) {
                    1
                } else {
                    last
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "position", rename_all = "snake_case")]
pub enum InputLayout {
    /// Five consecutive entries uniform in `[0, 1)`, zeros elsewhere.
    Supported(SupportPosition),
    /// Every entry uniform in `(−1, 1)`.
    Dense,
}

impl InputLayout {
    pub fn sample<R: Rng + ?Sized>(self, d: usize, rng: &mut R) -> Vec<f64> {
        match self {
            InputLayout::Supported(pos) => {
                let mut x = vec![0.0; d];
                let start = pos.start(d, rng);
                for v in &mut x[start - 1..start - 1 + SUPPORT_LEN] {
                    *v = rng.gen::<f64>();
                }
                x
            }
            InputLayout::Dense => (0..d)
                .map(|_| loop {
                    let v = rng.gen_range(-1.0..1.0);
                    if v != -1.0 {
                        break v;
                    }
                })
                .collect(),
        }
    }

    fn check_dim(self, d: usize) -> Result<()> {
        match self {
            InputLayout::Supported(SupportPosition::Middle) if d < 17 => {
                invalid("middle support needs at least 17 coordinates")
            }
            InputLayout::Supported(_) if d < SUPPORT_LEN => {
                invalid(format!("support of length {SUPPORT_LEN} needs d >= {SUPPORT_LEN}"))
            }
            _ if d == 0 => invalid("input dimension must be positive"),
            _ => Ok(()),
        }
    }
}

/// Closed-form regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formula {
    /// `x₁ + x₂ + x₃x₄ + x₅²`.
    F1,
    /// Sum of products of every five consecutive coordinates.
    F2,
    /// `sin(‖x‖²) + ½cos(‖x‖²)`.
    F3,
}

impl Formula {
    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            Formula::F1 => x[0] + x[1] + x[2] * x[3] + x[4] * x[4],
            Formula::F2 => x.windows(SUPPORT_LEN).map(|w| w.iter().product::<f64>()).sum(),
            Formula::F3 => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                r2.sin() + 0.5 * r2.cos()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "name", rename_all = "snake_case")]
pub enum Generator {
    Formula(Formula),
    /// A frozen random network drawn from the experiment seed.
    Target(TargetKind),
}

impl Generator {
    pub fn name(&self) -> String {
        match self {
            Generator::Formula(f) => format!("{f:?}").to_lowercase(),
            Generator::Target(t) => format!("target_{t:?}").to_lowercase(),
        }
    }

    /// Fixes the target function; random targets are drawn from `seed`.
    pub fn resolve(&self, seed: u64) -> TargetFn {
        match *self {
            Generator::Formula(f) => TargetFn::Formula(f),
            Generator::Target(kind) => TargetFn::Network(Box::new(kind.instantiate(seed))),
        }
    }
}

/// A concrete regression function.
#[derive(Debug, Clone)]
pub enum TargetFn {
    Formula(Formula),
    Network(Box<Network>),
}

impl TargetFn {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            TargetFn::Formula(f) => {
                if matches!(f, Formula::F1) && x.len() < SUPPORT_LEN {
                    return invalid("f1 needs at least five coordinates");
                }
                Ok(f.eval(x))
            }
            TargetFn::Network(net) => net.forward(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: Option<u64>,
    pub layout: Option<InputLayout>,
    pub noise_std: f64,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One sample per row.
    pub inputs: Matrix,
    pub targets: Vec<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn sample(&self, i: usize) -> (&[f64], f64) {
        (self.inputs.row(i), self.targets[i])
    }
}

/// Draws `m` samples `(x, f(x) + ε)` with `ε ~ N(0, noise_std²)`.
pub fn generate(
    target: &TargetFn,
    name: &str,
    d: usize,
    m: usize,
    seed: u64,
    layout: InputLayout,
    noise_std: f64,
) -> Result<Dataset> {
    if m == 0 {
        return invalid("dataset size must be at least 1");
    }
    layout.check_dim(d)?;
    let noise = Normal::new(0.0, noise_std)
        .map_err(|e| Error::InvalidArgument(format!("noise level {noise_std}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(m * d);
    let mut targets = Vec::with_capacity(m);
    for _ in 0..m {
        let x = layout.sample(d, &mut rng);
        let mut y = target.eval(&x)?;
        if noise_std > 0.0 {
            y += noise.sample(&mut rng);
        }
        data.extend_from_slice(&x);
        targets.push(y);
    }
    Ok(Dataset {
        inputs: Matrix::from_row_major(m, d, data)?,
        targets,
        meta: DatasetMeta {
            seed: Some(seed),
            layout: Some(layout),
            noise_std,
            generator: name.to_string(),
        },
    })
}

/// Dataset of one of the closed-form functions.
pub fn generate_formula(
    formula: Formula,
    d: usize,
    m: usize,
    seed: u64,
    layout: InputLayout,
    noise_std: f64,
) -> Result<Dataset> {
    let name = Generator::Formula(formula).name();
    generate(&TargetFn::Formula(formula), &name, d, m, seed, layout, noise_std)
}

/// Reads `d` feature columns followed by one target column. A first row
/// containing any non-numeric field is treated as a header.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;

    let mut width = None;
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::Input(format!("line {line}: {e}")))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<Option<f64>> = record.iter().map(|f| f.parse().ok()).collect();
        if line == 1 && parsed.iter().any(Option::is_none) {
            continue;
        }
        let expected = *width.get_or_insert(parsed.len());
        if parsed.len() != expected {
            return Err(Error::Input(format!(
                "line {line}: expected {expected} fields, found {}",
                parsed.len()
            )));
        }
        if expected < 2 {
            return Err(Error::Input(format!(
                "line {line}: need at least one feature column and a target column"
            )));
        }
        let values: Vec<f64> = parsed
            .into_iter()
            .enumerate()
            .map(|(c, v)| {
                v.ok_or_else(|| Error::Input(format!("line {line}, column {}: not a number", c + 1)))
            })
            .collect::<Result<_>>()?;
        data.extend_from_slice(&values[..expected - 1]);
        targets.push(values[expected - 1]);
    }
    let Some(width) = width else {
        return Err(Error::Input(format!("{}: no data rows", path.display())));
    };
    Ok(Dataset {
        inputs: Matrix::from_row_major(targets.len(), width - 1, data)?,
        targets,
        meta: DatasetMeta {
            seed: None,
            layout: None,
            noise_std: 0.0,
            generator: format!("csv:{}", path.display()),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_values() {
        let mut x = vec![0.0; 30];
        x[..5].iter_mut().for_each(|v| *v = 1.0);
        assert_eq!(Formula::F1.eval(&x), 4.0);
        assert_eq!(Formula::F2.eval(&[0.0; 30]), 0.0);
        assert_eq!(Formula::F3.eval(&[0.0; 30]), 0.5);
        assert_eq!(Formula::F2.eval(&x), 1.0);
    }

    #[test]
    fn supported_inputs_have_five_consecutive_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for pos in [
            SupportPosition::Random,
            SupportPosition::Beginning,
            SupportPosition::Middle,
            SupportPosition::End,
            SupportPosition::Edge,
        ] {
            for _ in 0..50 {
                let x = InputLayout::Supported(pos).sample(30, &mut rng);
                let nz: Vec<usize> = (0..30).filter(|&i| x[i] != 0.0).collect();
                let first = nz[0];
                assert!(nz.iter().all(|&i| i >= first && i < first + 5));
                assert!(x.iter().all(|v| (0.0..1.0).contains(v)));
                match pos {
                    SupportPosition::Beginning => assert_eq!(first, 0),
                    SupportPosition::Middle => assert_eq!(first, 12),
                    SupportPosition::End => assert!(first >= 25),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn dense_inputs_in_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = InputLayout::Dense.sample(1000, &mut rng);
        assert!(x.iter().all(|v| *v > -1.0 && *v < 1.0));
    }

    #[test]
    fn same_seed_same_data() {
        let layout = InputLayout::Supported(SupportPosition::Random);
        let a = generate_formula(Formula::F3, 30, 20, 9, layout, 0.1).unwrap();
        let b = generate_formula(Formula::F3, 30, 20, 9, layout, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_rejected() {
        let layout = InputLayout::Dense;
        assert!(generate_formula(Formula::F1, 30, 0, 0, layout, 0.0).is_err());
    }
}
