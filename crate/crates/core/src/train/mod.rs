//! Empirical risk minimisation with Adam, synthetic data and the experiment
//! harness.

mod data;
mod harness;

pub use data::{
    generate, generate_formula, load_csv, Dataset, DatasetMeta, Formula, Generator, InputLayout,
    SupportPosition, TargetFn, SUPPORT_LEN,
};
pub use harness::{
    cell_seed, isotonic_non_increasing, run_experiment, write_csv, CellResult, ExperimentResult,
    ResultRow, RunOptions, CSV_HEADER,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nets::{Grads, Network, Param, Tape};

/// `π_M t = sign(t)·min(M, |t|)`.
pub fn truncate(bound: f64, t: f64) -> Result<f64> {
    if !(bound > 0.0) {
        return invalid(format!("truncation level must be positive, got {bound}"));
    }
    Ok(t.clamp(-bound, bound))
}

/// Full-batch up to this many samples, minibatches of [`DEFAULT_BATCH`] above it.
pub const FULL_BATCH_LIMIT: usize = 1000;
pub const DEFAULT_BATCH: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rates: Vec<f64>,
    /// Epochs at which the next learning rate takes over.
    pub boundaries: Vec<usize>,
    /// `None` picks full batch or [`DEFAULT_BATCH`] from the dataset size.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Clamp level applied to predictions at evaluation time.
    pub truncation: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            learning_rates: vec![0.003, 0.001, 0.0003, 0.0001],
            boundaries: vec![800, 1200, 1500],
            batch_size: None,
            seed: 0,
            truncation: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// The default schedule with its boundaries scaled to `epochs`.
    pub fn with_epochs(epochs: usize) -> Self {
        let base = Self::default();
        let boundaries = base
            .boundaries
            .iter()
            .map(|b| b * epochs / base.epochs)
            .collect();
        Self {
            epochs,
            boundaries,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.len() != self.boundaries.len() + 1 {
            return invalid("learning-rate schedule needs one more rate than boundaries");
        }
        if self.boundaries.windows(2).any(|w| w[0] > w[1]) {
            return invalid("schedule boundaries must be non-decreasing");
        }
        if self.boundaries.last().is_some_and(|&b| b >= self.epochs) {
            return invalid("schedule boundaries must be below the epoch count");
        }
        if self.batch_size == Some(0) {
            return invalid("batch size must be positive");
        }
        if let Some(m) = self.truncation {
            truncate(m, 0.0)?;
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let idx = self.boundaries.iter().take_while(|&&b| b <= epoch).count();
        self.learning_rates[idx]
    }

    pub fn batch_for(&self, m: usize) -> usize {
        self.batch_size
            .unwrap_or(if m <= FULL_BATCH_LIMIT { m } else { DEFAULT_BATCH })
            .min(m)
    }
}

/// Adam with bias correction; frozen tensors are skipped.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param], grads: &Grads, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &g)) in p.values.iter_mut().zip(&grads[i]).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training MSE before the first update, then after every epoch.
    pub loss_trace: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace is never empty")
    }

    /// The outlier rule: training did not reduce the loss.
    pub fn is_outlier(&self) -> bool {
        !(self.final_loss() < self.initial_loss())
    }
}

fn check_dims(net: &Network, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return invalid("dataset is empty");
    }
    if data.dim() != net.input_dim {
        return invalid(format!(
            "dataset has {} features, network expects {}",
            data.dim(),
            net.input_dim
        ));
    }
    Ok(())
}

/// Mean squared error on `data`, without truncation.
pub fn mse(net: &Network, data: &Dataset) -> Result<f64> {
    check_dims(net, data)?;
    let mut tape = Tape::default();
    let mut total = 0.0;
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        let r = net.forward_taped(x, &mut tape)? - y;
        total += r * r;
    }
    Ok(total / data.len() as f64)
}

/// Test RMSE, applying `π_M` to predictions when `truncation` is set.
pub fn rmse(net: &Network, data: &Dataset, truncation: Option<f64>) -> Result<f64> {
    check_dims(net, data)?;
    let mut tape = Tape::default();
    let mut total = 0.0;
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        let mut pred = net.forward_taped(x, &mut tape)?;
        if let Some(m) = truncation {
            pred = truncate(m, pred)?;
        }
        total += (pred - y).powi(2);
    }
    Ok((total / data.len() as f64).sqrt())
}

/// Minimises the training MSE of `net` in place.
pub fn train_erm(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_dims(net, data)?;
    net.validate()?;
    let m = data.len();
    let batch = cfg.batch_for(m);
    let full_batch = batch == m;
    let shapes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(&shapes, cfg.beta1, cfg.beta2, cfg.eps);
    let mut grads = net.zero_grads();
    let mut tape = Tape::default();
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    if !full_batch {
        trace.push(mse(net, data)?);
    }

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        if !full_batch {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
            let scale = 2.0 / chunk.len() as f64;
            for &i in chunk {
                let (x, y) = data.sample(i);
                let r = net.forward_taped(x, &mut tape)? - y;
                epoch_loss += r * r;
                net.backward(&mut tape, scale * r, &mut grads);
            }
            let mut params = net.params_mut();
            adam.step(&mut params, &grads, lr);
        }
        let loss = if full_batch {
            epoch_loss / m as f64
        } else {
            mse(net, data)?
        };
        if !loss.is_finite() {
            return Err(Error::NumericFailure(format!(
                "training loss became {loss} at epoch {epoch}"
            )));
        }
        trace.push(loss);
    }
    if full_batch {
        // The loss seen during epoch e is the loss before its update; close the trace
        // with the loss of the final parameters.
        let last = mse(net, data)?;
        if !last.is_finite() {
            return Err(Error::NumericFailure(format!(
                "training loss became {last} at epoch {}",
                cfg.epochs
            )));
        }
        trace.push(last);
    }
    Ok(TrainReport { loss_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_examples() {
        assert_eq!(truncate(2.0, 3.5).unwrap(), 2.0);
        assert_eq!(truncate(2.0, -3.0).unwrap(), -2.0);
        assert_eq!(truncate(2.0, 1.0).unwrap(), 1.0);
        assert!(truncate(0.0, 1.0).is_err());
        assert!(truncate(-1.0, 1.0).is_err());
    }

    #[test]
    fn schedule_lookup() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(0), 0.003);
        assert_eq!(cfg.learning_rate(799), 0.003);
        assert_eq!(cfg.learning_rate(800), 0.001);
        assert_eq!(cfg.learning_rate(1200), 0.0003);
        assert_eq!(cfg.learning_rate(1999), 0.0001);
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_schedules_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.boundaries = vec![1200, 800, 1500];
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.epochs = 1000;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn batch_policy() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.batch_for(900), 900);
        assert_eq!(cfg.batch_for(1000), 1000);
        assert_eq!(cfg.batch_for(4000), 128);
    }

    #[test]
    fn one_adam_step_on_square() {
        // f(w) = w², w₀ = 1, gradient 2.
        let mut p = Param::trainable(vec![1.0]);
        let mut adam = Adam::new(&[1], 0.9, 0.999, 1e-8);
        adam.step(&mut [&mut p], &vec![vec![2.0]], 0.1);
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.values[0] - expected).abs() < 1e-15);
        assert!((p.values[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut p = Param::frozen(vec![1.0]);
        let mut adam = Adam::new(&[1], 0.9, 0.999, 1e-8);
        adam.step(&mut [&mut p], &vec![vec![2.0]], 0.1);
        assert_eq!(p.values[0], 1.0);
    }
}
