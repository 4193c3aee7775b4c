//! Mini-batch training loop with deterministic shuffling and a
//! halve-on-stall learning-rate schedule.

use super::adam::AdamState;
use super::rng::lcg_shuffle;
use super::sequential::Sequential;
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Epochs without loss improvement before the learning rate halves.
    pub lr_patience: usize,
    pub lr_min: f64,
    /// Weight-penalty factor added to the loss as `lambda * |theta|^2`.
    pub weight_penalty: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument("epochs and batch size must be positive".into()));
        }
        if !(self.lr0 > self.lr_min && self.lr_min > 0.0) {
            return Err(Error::Argument(
                "learning rates must satisfy lr0 > lr_min > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Halves the learning rate when the best loss has not improved for
/// `patience` epochs, floored at `lr_min`.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    lr: f64,
    lr_min: f64,
    patience: usize,
    best: f64,
    stall: usize,
}

impl LrSchedule {
    pub fn new(lr0: f64, patience: usize, lr_min: f64) -> Self {
        Self {
            lr: lr0,
            lr_min,
            patience: patience.max(1),
            best: f64::INFINITY,
            stall: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records an epoch loss; returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.stall = 0;
        } else {
            self.stall += 1;
            if self.stall >= self.patience {
                self.lr = (self.lr / 2.0).max(self.lr_min);
                self.stall = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    /// Mean per-sample loss per epoch.
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub aborted: bool,
}

impl TrainHistory {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Generic epoch/batch driver. `step` receives the batch indices and the
/// current learning rate; it computes the batch loss, fills the model
/// gradients, and applies one optimizer update. Batches are drawn from a
/// seeded shuffle, serially.
pub fn train_loop(
    n_samples: usize,
    cfg: &TrainConfig,
    mut step: impl FnMut(&[usize], f64) -> Result<f64>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::Argument("empty dataset".into()));
    }
    let mut schedule = LrSchedule::new(cfg.lr0, cfg.lr_patience, cfg.lr_min);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..n_samples).collect();
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr();
        order.sort_unstable();
        lcg_shuffle(&mut order, cfg.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size.min(n_samples)) {
            let loss = step(batch, lr)?;
            if !loss.is_finite() {
                history.aborted = true;
                log::error!("non-finite loss at epoch {epoch}, aborting");
                return Ok(history);
            }
            epoch_loss += loss * batch.len() as f64;
            seen += batch.len();
        }
        let mean_loss = epoch_loss / seen as f64;
        history.losses.push(mean_loss);
        history.lrs.push(lr);
        schedule.observe(mean_loss);
    }
    Ok(history)
}

/// Loss over a batch of (output, target) rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean over the batch of `|y - t|^2`.
    Mse,
    /// Mean over the batch of `|y - t|^2 / |t|^2`; zero-norm targets are
    /// excluded.
    RelativeMse,
}

impl LossKind {
    /// Batch loss and output gradient.
    pub fn eval(&self, y: &Tensor, target: &Tensor) -> (f64, Tensor) {
        let b = y.batch();
        let row = y.len() / b.max(1);
        let mut grad = Tensor::zeros(y.shape());
        let mut loss = 0.0;
        let mut counted = 0usize;
        for s in 0..b {
            let ys = &y.data()[s * row..(s + 1) * row];
            let ts = &target.data()[s * row..(s + 1) * row];
            match self {
                LossKind::Mse => {
                    let mut acc = 0.0;
                    for (k, (&yv, &tv)) in ys.iter().zip(ts).enumerate() {
                        let d = yv - tv;
                        acc += d * d;
                        grad.data_mut()[s * row + k] = 2.0 * d;
                    }
                    loss += acc;
                    counted += 1;
                }
                LossKind::RelativeMse => {
                    let norm_sq: f64 = ts.iter().map(|v| v * v).sum();
                    if norm_sq == 0.0 {
                        log::warn!("skipping zero-norm target in batch row {s}");
                        continue;
                    }
                    let mut acc = 0.0;
                    for (k, (&yv, &tv)) in ys.iter().zip(ts).enumerate() {
                        let d = yv - tv;
                        acc += d * d;
                        grad.data_mut()[s * row + k] = 2.0 * d / norm_sq;
                    }
                    loss += acc / norm_sq;
                    counted += 1;
                }
            }
        }
        let scale = 1.0 / counted.max(1) as f64;
        for g in grad.data_mut() {
            *g *= scale;
        }
        (loss * scale, grad)
    }
}

/// Supervised training of a [`Sequential`] on (input, target) rows.
pub fn train_network(
    net: &mut Sequential,
    inputs: &Tensor,
    targets: &Tensor,
    loss: LossKind,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let n = inputs.batch();
    if n != targets.batch() {
        return Err(Error::Shape(format!(
            "{n} inputs vs {} targets",
            targets.batch()
        )));
    }
    let in_row = inputs.len() / n;
    let t_row = targets.len() / n;
    let mut adam = AdamState::new();
    let in_tail: Vec<usize> = inputs.shape()[1..].to_vec();
    let t_tail: Vec<usize> = targets.shape()[1..].to_vec();
    train_loop(n, cfg, |batch, lr| {
        let mut x_shape = vec![batch.len()];
        x_shape.extend_from_slice(&in_tail);
        let mut t_shape = vec![batch.len()];
        t_shape.extend_from_slice(&t_tail);
        let mut x = Tensor::zeros(&x_shape);
        let mut t = Tensor::zeros(&t_shape);
        for (row, &idx) in batch.iter().enumerate() {
            x.data_mut()[row * in_row..(row + 1) * in_row]
                .copy_from_slice(&inputs.data()[idx * in_row..(idx + 1) * in_row]);
            t.data_mut()[row * t_row..(row + 1) * t_row]
                .copy_from_slice(&targets.data()[idx * t_row..(idx + 1) * t_row]);
        }
        net.zero_grads();
        let cache = net.forward_cached(&x)?;
        let (mut batch_loss, dy) = loss.eval(cache.output(), &t);
        net.backward(&cache, &dy)?;
        if cfg.weight_penalty > 0.0 {
            batch_loss += cfg.weight_penalty * net.params_sq_norm();
            net.add_weight_penalty_grads(cfg.weight_penalty);
        }
        adam.step(&mut net.param_slots(), lr);
        Ok(batch_loss)
    })
}
