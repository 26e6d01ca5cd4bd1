//! SGD training loop, evaluation and per-epoch reports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::ParamStore;
use crate::rng::{Rng, Stream};
use crate::vit::{Phase, VitModel};

pub const CSV_HEADER: &str = "epoch,lr,train_loss,eval_top1,tunable_params,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Re-estimate the head-norm statistics over the whole training set
    /// after every epoch.
    pub recalibrate_bn: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, warmup_epochs: 1, batch_size: 32, base_lr: 0.1, momentum: 0.9, weight_decay: 0.0, recalibrate_bn: false, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        for (name, v) in [("base_lr", self.base_lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// `base_lr · batch_size / 256`.
    pub fn effective_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }
}

/// Learning rate at a (possibly fractional) epoch: linear warm-up from zero,
/// then half-cosine decay to zero at `epochs`.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    let peak = cfg.effective_lr();
    let (w, total) = (cfg.warmup_epochs as f64, cfg.epochs as f64);
    if epoch < w {
        return peak * epoch / w;
    }
    if total <= w {
        return peak;
    }
    let t = ((epoch - w) / (total - w)).clamp(0.0, 1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// SGD with classic momentum: `v ← m·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: HashMap::new() }
    }

    /// Updates every trainable parameter holding a gradient and clears it.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        for p in params.iter_mut() {
            if !p.tensor.requires_grad() {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else { continue };
            let v = self.velocity.entry(p.name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i] + self.weight_decay * data[i];
                v[i] = self.momentum * v[i] + g;
                data[i] -= lr * v[i];
            }
            p.tensor.zero_grad();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_top1: f64,
    pub tunable_params: usize,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub mode: String,
    /// Held-out top-1 before the first update.
    pub initial_top1: f64,
    pub rows: Vec<EpochRow>,
}

impl RunReport {
    pub fn final_top1(&self) -> f64 {
        self.rows.last().map_or(self.initial_top1, |r| r.eval_top1)
    }

    pub fn tunable_params(&self) -> usize {
        self.rows.first().map_or(0, |r| r.tunable_params)
    }

    /// Spread (max − min) of top-1 over the last `n` epochs.
    pub fn tail_range(&self, n: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        let max = tail.iter().map(|r| r.eval_top1).fold(f64::NEG_INFINITY, f64::max);
        let min = tail.iter().map(|r| r.eval_top1).fold(f64::INFINITY, f64::min);
        max - min
    }

    /// Rows with wall-clock time cleared, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        r.rows.iter_mut().for_each(|row| row.wall_ms = 0);
        r
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.lr, r.train_loss, r.eval_top1, r.tunable_params, r.wall_ms);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(CSV_HEADER.split(','))?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.lr.to_string(),
                r.train_loss.to_string(),
                r.eval_top1.to_string(),
                r.tunable_params.to_string(),
                r.wall_ms.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Parses a report written by [`RunReport::write_csv`].
    pub fn read_csv(path: &Path, mode: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header.join(",") != CSV_HEADER {
            return Err(Error::Format { path: path.to_path_buf(), reason: format!("unexpected header {header:?}") });
        }
        let bad = |what: &str| Error::Format { path: path.to_path_buf(), reason: format!("bad {what}") };
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            rows.push(EpochRow {
                epoch: f(0).parse().map_err(|_| bad("epoch"))?,
                lr: f(1).parse().map_err(|_| bad("lr"))?,
                train_loss: f(2).parse().map_err(|_| bad("train_loss"))?,
                eval_top1: f(3).parse().map_err(|_| bad("eval_top1"))?,
                tunable_params: f(4).parse().map_err(|_| bad("tunable_params"))?,
                wall_ms: f(5).parse().map_err(|_| bad("wall_ms"))?,
            });
        }
        Ok(RunReport { mode: mode.to_string(), initial_top1: f64::NAN, rows })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy in percent, in eval phase.
pub fn evaluate(model: &VitModel, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk);
        let logits = model.predict(&images)?;
        let c = logits.shape()[1];
        for (row, &label) in logits.data().chunks(c).zip(&labels) {
            correct += (argmax(row) == label) as usize;
        }
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Replaces the running head-norm statistics with the population mean and
/// unbiased variance of the eval-phase CLS features of `data`.
pub fn recalibrate_head_norm(model: &mut VitModel, data: &Dataset, batch_size: usize) -> Result<()> {
    if data.len() < 2 {
        return Err(Error::contract("recalibration needs at least two samples"));
    }
    let d = model.config().embed_dim;
    let (mut sum, mut sq) = (vec![0.0; d], vec![0.0; d]);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut feats = Vec::with_capacity(data.len() * d);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, _) = data.batch(chunk);
        feats.extend_from_slice(model.features(&images)?.data());
    }
    let n = data.len() as f64;
    for row in feats.chunks(d) {
        sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    for row in feats.chunks(d) {
        for j in 0..d {
            sq[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let var = sq.iter().map(|s| s / (n - 1.0)).collect();
    model.set_running_stats(mean, var)
}

/// One forward/backward/update on a batch. Returns the batch loss.
pub fn train_step(
    model: &mut VitModel,
    sgd: &mut Sgd,
    images: &[&[f64]],
    labels: &[usize],
    lr: f64,
    dropout_rng: &mut Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, images, Phase::Train, Some(dropout_rng))?;
    let loss = g.cross_entropy(out.logits, labels)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss)?;
    model.accumulate_grads(&grads, &out.bound)?;
    sgd.step(model.params_mut(), lr);
    if let Some(stats) = &out.batch_stats {
        model.update_running_stats(stats);
    }
    Ok(value)
}

/// Trains `model` in place and evaluates on `eval` after every epoch.
pub fn train(model: &mut VitModel, train_set: &Dataset, eval_set: &Dataset, cfg: &TrainConfig) -> Result<RunReport> {
    train_with(model, train_set, eval_set, cfg, |_| {})
}

/// [`train`] with a callback after each epoch row.
pub fn train_with(
    model: &mut VitModel,
    train_set: &Dataset,
    eval_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<RunReport> {
    cfg.validate()?;
    if train_set.num_classes != model.config().num_classes {
        return Err(Error::config(format!(
            "task has {} classes but the head has {}",
            train_set.num_classes,
            model.config().num_classes
        )));
    }
    if train_set.len() < cfg.batch_size {
        return Err(Error::config(format!(
            "{} training samples cannot fill a batch of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    let mut shuffle = Rng::stream(cfg.seed, Stream::Shuffle);
    let mut dropout = Rng::stream(cfg.seed, Stream::Dropout);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    model.params_mut().zero_grads();
    let tunable = model.tunable_param_count();
    let initial_top1 = evaluate(model, eval_set, cfg.batch_size)?;
    let steps = train_set.len() / cfg.batch_size;
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle.shuffle(&mut order);
        let mut total = 0.0;
        for (b, chunk) in order.chunks_exact(cfg.batch_size).enumerate() {
            let lr = lr_at(epoch as f64 + b as f64 / steps as f64, cfg);
            let (images, labels) = train_set.batch(chunk);
            let loss = train_step(model, &mut sgd, &images, &labels, lr, &mut dropout)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            total += loss;
        }
        if cfg.recalibrate_bn && model.config().head_norm {
            recalibrate_head_norm(model, train_set, cfg.batch_size)?;
        }
        let row = EpochRow {
            epoch,
            lr: lr_at(epoch as f64, cfg),
            train_loss: total / steps as f64,
            eval_top1: evaluate(model, eval_set, cfg.batch_size)?,
            tunable_params: tunable,
            wall_ms: start.elapsed().as_millis(),
        };
        on_epoch(&row);
        rows.push(row);
    }
    Ok(RunReport { mode: model.tuning().name().to_string(), initial_top1, rows })
}
