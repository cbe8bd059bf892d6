//! Curriculum-learning training loop with scheduled sampling.
//!
//! Iteration `iter` (1-based) trains on the first
//! `i = min(Q, 1 + floor(iter / s))` decoder steps and feeds labels back
//! with probability `tau / (tau + exp(iter / tau))`.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormStats, Sentinel, Split};
use crate::error::{Error, Result};
use crate::eval::{MetricAccumulator, Metrics};
use crate::graph::StaticGraph;
use crate::model::{forward, static_operands, Batch, Model};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Curriculum step size `s`: iterations per horizon increment.
    pub step_size: usize,
    /// Disable to always train on the full horizon.
    pub curriculum: bool,
    /// Scheduled-sampling decay `tau`.
    pub ss_decay_tau: u64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Global gradient-norm cap; `inf` disables clipping.
    pub grad_clip_norm: f64,
    /// Cap on training batches per epoch; 0 uses every window.
    pub max_batches_per_epoch: usize,
    /// Round parameters to f32 after every update.
    pub f32_params: bool,
    /// Record elapsed seconds in the log; off gives byte-stable logs.
    pub log_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            step_size: 2500,
            curriculum: true,
            ss_decay_tau: 4000,
            max_epochs: 100,
            patience: 15,
            grad_clip_norm: 5.0,
            max_batches_per_epoch: 0,
            f32_params: false,
            log_wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("train.learning_rate {} invalid", self.learning_rate)));
        }
        if self.batch_size == 0 || self.step_size == 0 || self.ss_decay_tau == 0 {
            return Err(Error::Config("train.batch_size, step_size and ss_decay_tau must be >= 1".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config(format!("train.grad_clip_norm {} must be positive", self.grad_clip_norm)));
        }
        Ok(())
    }
}

/// Decoder steps trained at iteration `iter` (1-based).
pub fn curriculum_horizon(iter: u64, s: u64, q: usize) -> usize {
    debug_assert!(iter >= 1 && s >= 1 && q >= 1);
    let i = 1 + iter / s.max(1);
    i.min(q as u64) as usize
}

/// Teacher-forcing probability at `iter`; 0 once `exp` overflows.
pub fn scheduled_sampling_prob(iter: u64, tau: u64) -> f64 {
    let tau = tau.max(1) as f64;
    let e = (iter as f64 / tau).exp();
    if !e.is_finite() {
        return 0.0;
    }
    tau / (tau + e)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && max_norm.is_finite() {
        let s = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Mean absolute error of denormalized predictions over observed targets of
/// the first `predictions.len()` steps. `None` when nothing is observed.
pub fn masked_mae_loss<'t>(predictions: &[Var<'t>], batch: &Batch, norm: NormStats) -> Result<Option<Var<'t>>> {
    let tape = match predictions.first() {
        Some(p) => p.tape(),
        None => return Ok(None),
    };
    let count: f64 = batch.mask[..predictions.len()].iter().map(|m| m.sum()).sum();
    if count == 0.0 {
        return Ok(None);
    }
    let mut total: Option<Var<'t>> = None;
    for (k, &p) in predictions.iter().enumerate() {
        let truth = tape.constant(batch.truth[k].clone());
        let mask = tape.constant(batch.mask[k].clone());
        let err = p.affine(norm.std, norm.mean).sub(truth)?.abs().mul(mask)?.sum();
        total = Some(match total {
            Some(t) => t.add(err)?,
            None => err,
        });
    }
    Ok(total.map(|t| t.scale(1.0 / count)))
}

/// Optimizer and schedule bookkeeping of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Next iteration to run, starting at 1.
    pub iter: u64,
    pub horizon: usize,
    pub adam: Adam,
    pub best_val: f64,
    pub epochs_since_best: usize,
    /// Decoder cell steps executed so far.
    pub decoder_steps: u64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        TrainState {
            iter: 1,
            horizon: 1,
            adam: Adam::new(cfg.learning_rate, model.params.tensors()),
            best_val: f64::INFINITY,
            epochs_since_best: 0,
            decoder_steps: 0,
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// `None` when the batch had no observed targets in range.
    pub loss: Option<f64>,
    pub horizon: usize,
    pub sampling_prob: f64,
    pub decoder_steps: usize,
    pub grad_norm: f64,
}

/// Horizon used at the state's current iteration.
pub fn step_horizon(state: &TrainState, cfg: &TrainConfig, q: usize) -> usize {
    if cfg.curriculum {
        curriculum_horizon(state.iter, cfg.step_size as u64, q)
    } else {
        q
    }
}

/// One optimizer iteration on `batch`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    batch: &Batch,
    batch_index: usize,
    state: &mut TrainState,
    model: &mut Model,
    graph: &StaticGraph,
    cfg: &TrainConfig,
    norm: NormStats,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let q = model.config.output_len;
    let horizon = step_horizon(state, cfg, q);
    let p_ss = scheduled_sampling_prob(state.iter, cfg.ss_decay_tau);
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let stat = static_operands(&tape, graph, model.n_nodes)?;
    let out = forward(&tape, batch, &stat, model, &bound, horizon, p_ss, rng)?;
    let loss = masked_mae_loss(&out.predictions, batch, norm)?;
    let mut outcome = StepOutcome {
        loss: None,
        horizon,
        sampling_prob: p_ss,
        decoder_steps: out.decoder_steps,
        grad_norm: 0.0,
    };
    if let Some(loss) = loss {
        let value = loss.value_ref().data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {value} at iteration {} (batch {batch_index})",
                state.iter
            )));
        }
        let grads = tape.backward(loss)?;
        let mut grads = bound.grads(&grads);
        drop(bound);
        outcome.grad_norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
        if !outcome.grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient norm at iteration {} (batch {batch_index})",
                state.iter
            )));
        }
        state.adam.step(model.params.tensors_mut(), &grads);
        if cfg.f32_params {
            for t in model.params.tensors_mut() {
                for v in t.data_mut() {
                    *v = *v as f32 as f64;
                }
            }
        }
        outcome.loss = Some(value);
    }
    state.horizon = horizon;
    state.decoder_steps += out.decoder_steps as u64;
    state.iter += 1;
    Ok(outcome)
}

/// Free-running predictions over every window of `split`, accumulated into
/// per-step masked metrics (in speed units).
pub fn evaluate_model(
    model: &Model,
    data: &Dataset,
    graph: &StaticGraph,
    split: Split,
    batch_size: usize,
    sentinel: Sentinel,
) -> Result<MetricAccumulator> {
    let q = model.config.output_len;
    let mut acc = MetricAccumulator::new(q, sentinel);
    let norm = data.norm;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in data.windows(split).chunks(batch_size.max(1)) {
        let batch = data.batch(chunk);
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let stat = static_operands(&tape, graph, model.n_nodes)?;
        let out = forward(&tape, &batch, &stat, model, &bound, q, 0.0, &mut rng)?;
        for (k, p) in out.predictions.iter().enumerate() {
            let pred = p.value_ref();
            for (i, (&z, &m)) in pred.data().iter().zip(batch.mask[k].data()).enumerate() {
                // Unobserved targets are stored as 0 and skipped by the mask.
                let truth = if m > 0.0 { batch.truth[k].data()[i] } else { f64::NAN };
                acc.add(k, norm.inverse(z), truth);
            }
        }
    }
    Ok(acc)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: f64,
    pub seconds: f64,
    pub horizon_i: usize,
    pub ss_prob: f64,
}

pub const LOG_HEADER: &str = "epoch,train_mae,val_mae,val_rmse,val_mape,seconds,horizon_i,ss_prob";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.4},{:.3},{},{:.6}",
            self.epoch,
            self.train_mae,
            self.val_mae,
            self.val_rmse,
            self.val_mape,
            self.seconds,
            self.horizon_i,
            self.ss_prob
        )
    }
}

pub fn write_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    for r in history {
        writeln!(f, "{}", r.csv_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub iterations: u64,
    pub decoder_steps: u64,
}

/// Trains `model` in place and leaves it at the best validation parameters.
pub fn fit(
    model: &mut Model,
    data: &Dataset,
    graph: &StaticGraph,
    cfg: &TrainConfig,
    sentinel: Sentinel,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    let mut train = data.windows(Split::Train);
    let val = data.windows(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "train split has {} windows and validation {}; both must be non-empty",
            train.len(),
            val.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = TrainState::new(model, cfg);
    let mut best = model.params.tensors().to_vec();
    let mut best_epoch = 0;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        train.shuffle(&mut rng);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        let mut last = None;
        for (bi, chunk) in train.chunks(cfg.batch_size).enumerate() {
            if cfg.max_batches_per_epoch > 0 && bi >= cfg.max_batches_per_epoch {
                break;
            }
            let batch = data.batch(chunk);
            let out = train_step(&batch, bi, &mut state, model, graph, cfg, data.norm, &mut rng)?;
            if let Some(l) = out.loss {
                loss_sum += l;
                loss_n += 1;
            }
            last = Some(out);
        }
        let val_metrics: Metrics = evaluate_model(model, data, graph, Split::Val, cfg.batch_size, sentinel)?
            .overall()
            .ok_or_else(|| Error::Config("validation split has no observed targets".into()))?;
        let record = EpochRecord {
            epoch,
            train_mae: if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN },
            val_mae: val_metrics.mae,
            val_rmse: val_metrics.rmse,
            val_mape: val_metrics.mape,
            seconds: if cfg.log_wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
            horizon_i: last.map_or(state.horizon, |o| o.horizon),
            ss_prob: last.map_or(0.0, |o| o.sampling_prob),
        };
        on_epoch(&record);
        state.history.push(record);
        if val_metrics.mae < state.best_val {
            state.best_val = val_metrics.mae;
            state.epochs_since_best = 0;
            best_epoch = epoch;
            best.clone_from_slice(model.params.tensors());
        } else {
            state.epochs_since_best += 1;
            if state.epochs_since_best >= cfg.patience.max(1) {
                break;
            }
        }
    }
    model.params.tensors_mut().clone_from_slice(&best);
    Ok(FitResult {
        history: state.history,
        best_epoch,
        best_val_mae: state.best_val,
        iterations: state.iter - 1,
        decoder_steps: state.decoder_steps,
    })
}
