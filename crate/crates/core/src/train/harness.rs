use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{generate, Dataset, TargetFn};
use super::{rmse, train_erm, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::nets::{count_parameters, Architecture, ExperimentConfig, ExperimentName};

pub const CSV_HEADER: [&str; 9] = [
    "experiment",
    "architecture",
    "depth",
    "m",
    "seed_count",
    "rmse_mean",
    "rmse_std",
    "params",
    "seconds",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub repeats: usize,
    pub seed: u64,
    pub train: TrainConfig,
    /// Restrict to these architecture names.
    pub architectures: Option<Vec<String>>,
    /// Override the preset training-set sizes.
    pub train_sizes: Option<Vec<usize>>,
    /// Write zero into the `seconds` column so outputs are byte-reproducible.
    pub record_timing: bool,
    pub keep_traces: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            repeats: 10,
            seed: 0,
            train: TrainConfig::default(),
            architectures: None,
            train_sizes: None,
            record_timing: true,
            keep_traces: false,
        }
    }
}

/// One trained network: an (architecture, m, repeat) coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub architecture: String,
    pub depth: usize,
    pub m: usize,
    pub repeat: usize,
    pub params: usize,
    /// Test RMSE per test variant, in configuration order.
    pub test_rmse: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub retained: bool,
    pub seconds: f64,
    /// Set when training failed numerically; the cell counts as an outlier.
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_trace: Vec<f64>,
}

/// Aggregate over retained repeats; `None` statistics mark a missing cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub architecture: String,
    pub depth: usize,
    pub m: usize,
    pub seed_count: usize,
    pub rmse_mean: Option<f64>,
    pub rmse_std: Option<f64>,
    pub params: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment: ExperimentName,
    pub target_seed: u64,
    pub variants: Vec<String>,
    pub rows: Vec<ResultRow>,
    pub cells: Vec<CellResult>,
}

impl ExperimentResult {
    pub fn row(&self, variant: &str, architecture: &str, m: usize) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.experiment == variant && r.architecture == architecture && r.m == m)
    }

    /// Test RMSE of every retained repeat, ordered by repeat index.
    pub fn retained_rmse(&self, variant: &str, architecture: &str, m: usize) -> Vec<f64> {
        let Some(v) = self.variants.iter().position(|x| x == variant) else {
            return Vec::new();
        };
        self.cells
            .iter()
            .filter(|c| c.retained && c.architecture == architecture && c.m == m)
            .map(|c| c.test_rmse[v])
            .collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable seed for a cell from the run seed and the cell's coordinates.
pub fn cell_seed(base: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix(base), |h, &c| splitmix(h ^ splitmix(c.wrapping_add(0x51ed))))
}

const TAG_TARGET: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_TEST: u64 = 3;
const TAG_INIT: u64 = 4;
const TAG_SHUFFLE: u64 = 5;

struct Split {
    m: usize,
    repeat: usize,
    train: Dataset,
    tests: Vec<Dataset>,
}

/// Trains every selected architecture for every training size and repeat,
/// drops outlier repeats and aggregates test RMSE.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentResult> {
    if opts.repeats == 0 {
        return invalid("at least one repeat is required");
    }
    opts.train.validate()?;
    let archs: Vec<&Architecture> = match &opts.architectures {
        None => config.architectures.iter().collect(),
        Some(names) => {
            for n in names {
                if !config.architectures.iter().any(|a| &a.name == n) {
                    return invalid(format!(
                        "experiment {} has no architecture `{n}`",
                        config.name
                    ));
                }
            }
            config
                .architectures
                .iter()
                .filter(|a| names.contains(&a.name))
                .collect()
        }
    };
    let sizes = opts.train_sizes.as_ref().unwrap_or(&config.train_sizes);
    if sizes.is_empty() || sizes.contains(&0) {
        return invalid("training sizes must be positive");
    }

    let target_seed = cell_seed(opts.seed, &[TAG_TARGET]);
    let target: TargetFn = config.generator.resolve(target_seed);
    let gen_name = config.generator.name();

    let coords: Vec<(usize, usize)> = sizes
        .iter()
        .flat_map(|&m| (0..opts.repeats).map(move |r| (m, r)))
        .collect();
    let splits: Vec<Split> = coords
        .par_iter()
        .map(|&(m, r)| -> Result<Split> {
            let key = [m as u64, r as u64];
            let train = generate(
                &target,
                &gen_name,
                config.input_dim,
                m,
                cell_seed(opts.seed, &[TAG_TRAIN, key[0], key[1]]),
                config.train_layout,
                config.noise_std,
            )?;
            let tests = config
                .test_variants
                .iter()
                .enumerate()
                .map(|(v, variant)| {
                    generate(
                        &target,
                        &gen_name,
                        config.input_dim,
                        config.test_size,
                        cell_seed(opts.seed, &[TAG_TEST, key[0], key[1], v as u64]),
                        variant.layout,
                        config.noise_std,
                    )
                })
                .collect::<Result<_>>()?;
            Ok(Split {
                m,
                repeat: r,
                train,
                tests,
            })
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(&Split, usize, &Architecture)> = splits
        .iter()
        .flat_map(|s| archs.iter().enumerate().map(move |(i, a)| (s, i, *a)))
        .collect();
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(split, arch_idx, arch)| run_cell(config, opts, split, arch_idx, arch))
        .collect::<Result<_>>()?;

    let variants: Vec<String> = config.test_variants.iter().map(|v| v.label.clone()).collect();
    let mut rows = Vec::new();
    for (v, label) in variants.iter().enumerate() {
        for arch in &archs {
            for &m in sizes {
                let group: Vec<&CellResult> = cells
                    .iter()
                    .filter(|c| c.architecture == arch.name && c.m == m)
                    .collect();
                let kept: Vec<&CellResult> = group.iter().copied().filter(|c| c.retained).collect();
                let values: Vec<f64> = kept.iter().map(|c| c.test_rmse[v]).collect();
                let (mean, std) = mean_std(&values);
                let seconds = if opts.record_timing && !kept.is_empty() {
                    kept.iter().map(|c| c.seconds).sum::<f64>() / kept.len() as f64
                } else {
                    0.0
                };
                rows.push(ResultRow {
                    experiment: label.clone(),
                    architecture: arch.name.clone(),
                    depth: arch.depth(),
                    m,
                    seed_count: kept.len(),
                    rmse_mean: mean,
                    rmse_std: std,
                    params: group.first().map_or(0, |c| c.params),
                    seconds,
                });
            }
        }
    }
    Ok(ExperimentResult {
        experiment: config.name,
        target_seed,
        variants,
        rows,
        cells,
    })
}

fn run_cell(
    config: &ExperimentConfig,
    opts: &RunOptions,
    split: &Split,
    arch_idx: usize,
    arch: &Architecture,
) -> Result<CellResult> {
    let key = [split.m as u64, split.repeat as u64, arch_idx as u64];
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(opts.seed, &[TAG_INIT, key[0], key[1], key[2]]));
    let mut net = arch.build(config.input_dim, &mut rng)?;
    let params = count_parameters(&net).features;
    let train_cfg = TrainConfig {
        seed: cell_seed(opts.seed, &[TAG_SHUFFLE, key[0], key[1], key[2]]),
        ..opts.train.clone()
    };
    let started = Instant::now();
    let outcome = train_erm(&mut net, &split.train, &train_cfg);
    let seconds = if opts.record_timing {
        started.elapsed().as_secs_f64()
    } else {
        0.0
    };
    let mut cell = CellResult {
        architecture: arch.name.clone(),
        depth: arch.depth(),
        m: split.m,
        repeat: split.repeat,
        params,
        test_rmse: Vec::new(),
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
        retained: false,
        seconds,
        error: None,
        loss_trace: Vec::new(),
    };
    match outcome {
        Ok(report) => {
            cell.initial_loss = report.initial_loss();
            cell.final_loss = report.final_loss();
            cell.retained = !report.is_outlier();
            cell.test_rmse = split
                .tests
                .iter()
                .map(|t| rmse(&net, t, opts.train.truncation))
                .collect::<Result<_>>()?;
            if opts.keep_traces {
                cell.loss_trace = report.loss_trace;
            }
        }
        Err(Error::NumericFailure(msg)) => {
            cell.test_rmse = vec![f64::NAN; split.tests.len()];
            cell.error = Some(msg);
        }
        Err(e) => return Err(e),
    }
    Ok(cell)
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(std))
}

/// Writes rows under [`CSV_HEADER`]; missing statistics become empty fields.
pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Input(format!("writing CSV: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.architecture.clone(),
            r.depth.to_string(),
            r.m.to_string(),
            r.seed_count.to_string(),
            opt(r.rmse_mean),
            opt(r.rmse_std),
            r.params.to_string(),
            r.seconds.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares non-increasing fit (pool adjacent violators).
pub fn isotonic_non_increasing(values: &[f64]) -> Vec<f64> {
    // Blocks of (sum, count); merge while a later block's mean exceeds an earlier one.
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s1, n1) = blocks[blocks.len() - 2];
            let (s2, n2) = blocks[blocks.len() - 1];
            if s2 / n2 as f64 > s1 / n1 as f64 {
                blocks.pop();
                *blocks.last_mut().unwrap() = (s1 + s2, n1 + n2);
            } else {
                break;
            }
        }
    }
    blocks
        .into_iter()
        .flat_map(|(s, n)| std::iter::repeat(s / n as f64).take(n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_depend_on_every_coordinate() {
        let a = cell_seed(7, &[1, 2, 3]);
        assert_eq!(a, cell_seed(7, &[1, 2, 3]));
        assert_ne!(a, cell_seed(7, &[1, 3, 2]));
        assert_ne!(a, cell_seed(8, &[1, 2, 3]));
    }

    #[test]
    fn isotonic_fit() {
        assert_eq!(isotonic_non_increasing(&[3.0, 1.0, 2.0]), vec![3.0, 1.5, 1.5]);
        assert_eq!(isotonic_non_increasing(&[1.0, 2.0]), vec![1.5, 1.5]);
        let v = [5.0, 4.0, 4.5, 1.0, 2.0];
        let fit = isotonic_non_increasing(&v);
        assert!(fit.windows(2).all(|w| w[0] >= w[1]));
        assert!((fit.iter().sum::<f64>() - v.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, Some(2.0));
        assert!((s.unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[]), (None, None));
    }

    #[test]
    fn csv_layout() {
        let rows = vec![ResultRow {
            experiment: "fit_f1".into(),
            architecture: "1-layer fc".into(),
            depth: 1,
            m: 900,
            seed_count: 0,
            rmse_mean: None,
            rmse_std: None,
            params: 300,
            seconds: 0.0,
        }];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "experiment,architecture,depth,m,seed_count,rmse_mean,rmse_std,params,seconds\n\
             fit_f1,1-layer fc,1,900,0,,,300,0\n"
        );
    }
}
