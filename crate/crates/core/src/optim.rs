//! Binary cross-entropy, the triangular cyclic learning rate, RMSprop, and
//! the epoch loop.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mode, Network};
use crate::snapshot::{save_checkpoint, Checkpoint};
use crate::tensor::{Scalar, TensorF32};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before taking logs.
pub const P_CLAMP: f64 = 1e-7;

/// Checkpoint stores must keep at least this many recent epochs.
pub const MIN_RETENTION: usize = 61;

/// Loss and `dLoss/dp` for one prediction.
pub fn bce_loss(p: f64, y: u8) -> Result<(f64, f64)> {
    if y > 1 {
        return Err(Error::Argument(format!("label {y} not in {{0,1}}")));
    }
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let y = y as f64;
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let grad = -y / p + (1.0 - y) / (1.0 - p);
    Ok((loss, grad))
}

/// Mean binary cross-entropy over a batch.
pub fn bce_batch(ps: &[f64], ys: &[u8]) -> Result<f64> {
    if ps.len() != ys.len() || ps.is_empty() {
        return Err(Error::Argument(format!("{} predictions for {} labels", ps.len(), ys.len())));
    }
    let mut total = 0.0;
    for (&p, &y) in ps.iter().zip(ys) {
        total += bce_loss(p, y)?.0;
    }
    Ok(total / ps.len() as f64)
}

/// Triangular cyclic learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClrSchedule {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Iterations per half cycle.
    pub step_size: usize,
}

impl Default for ClrSchedule {
    fn default() -> Self {
        Self { base_lr: 1e-4, max_lr: 1e-3, step_size: 2000 }
    }
}

impl ClrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr <= self.max_lr && self.max_lr.is_finite()) {
            return Err(Error::Argument(format!(
                "schedule needs 0 < base_lr <= max_lr, got {} / {}",
                self.base_lr, self.max_lr
            )));
        }
        if self.step_size == 0 {
            return Err(Error::Argument("step_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr(&self, iteration: u64) -> f64 {
        clr_lr(iteration, self)
    }
}

/// Learning rate at 0-based `iteration`.
pub fn clr_lr(iteration: u64, s: &ClrSchedule) -> f64 {
    let step = s.step_size.max(1) as f64;
    let it = iteration as f64;
    let cycle = (1.0 + it / (2.0 * step)).floor();
    let x = (it / step - 2.0 * cycle + 1.0).abs();
    let t = (1.0 - x).max(0.0);
    // Convex form so both endpoints are hit exactly.
    (s.base_lr * (1.0 - t) + s.max_lr * t).clamp(s.base_lr, s.max_lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmspropConfig {
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmspropConfig {
    fn default() -> Self {
        Self { rho: 0.9, eps: 1e-7 }
    }
}

/// Running mean of squared gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    pub cache: Vec<f64>,
    pub rho: f64,
    pub eps: f64,
}

impl RmspropState {
    pub fn new(len: usize, cfg: RmspropConfig) -> Self {
        Self { cache: vec![0.0; len], rho: cfg.rho, eps: cfg.eps }
    }
}

/// `cache ← ρ·cache + (1−ρ)·g²; θ ← θ − lr·g / (√cache + ε)`.
pub fn rmsprop_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut RmspropState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.cache.len() {
        return Err(Error::shape(
            format!("{} params and cache entries", params.len()),
            format!("{} grads, {} cache", grads.len(), state.cache.len()),
        ));
    }
    let (rho, eps) = (state.rho, state.eps);
    for ((p, &g), c) in params.iter_mut().zip(grads).zip(state.cache.iter_mut()) {
        let g = g.to_f64();
        *c = rho * *c + (1.0 - rho) * g * g;
        *p = T::from_f64(p.to_f64() - lr * g / (c.sqrt() + eps));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: ClrSchedule,
    pub rmsprop: RmspropConfig,
    /// Dropout rate used when building networks for this run.
    pub dropout: f64,
    /// Reshuffle sample order each epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            seed: 0,
            schedule: ClrSchedule::default(),
            rmsprop: RmspropConfig::default(),
            dropout: crate::nn::DEFAULT_DROPOUT,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be at least 1".into()));
        }
        crate::nn::layers::check_rate(self.dropout)?;
        self.schedule.validate()
    }
}

/// One epoch's summary. Epochs are numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub checkpoint: String,
}

/// Labelled inputs for training or evaluation.
#[derive(Debug, Clone, Default)]
pub struct Samples {
    pub inputs: Vec<TensorF32>,
    pub labels: Vec<u8>,
}

impl Samples {
    pub fn new(inputs: Vec<TensorF32>, labels: Vec<u8>) -> Result<Self> {
        let s = Self { inputs, labels };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.labels.len() {
            return Err(Error::Argument(format!("{} inputs for {} labels", self.inputs.len(), self.labels.len())));
        }
        if let Some(y) = self.labels.iter().find(|&&y| y > 1) {
            return Err(Error::Argument(format!("label {y} not in {{0,1}}")));
        }
        Ok(())
    }
}

/// Fraction of predictions with `(p > threshold) == y`.
pub fn accuracy(ps: &[f64], ys: &[u8], threshold: f64) -> f64 {
    if ps.is_empty() {
        return 0.0;
    }
    let hits = ps.iter().zip(ys).filter(|(&p, &y)| (p > threshold) == (y == 1)).count();
    hits as f64 / ps.len() as f64
}

/// Receives the checkpoint written at the end of every epoch.
pub trait CheckpointSink {
    /// Store and return a reference string for the history.
    fn store(&mut self, checkpoint: Checkpoint) -> Result<String>;
}

fn check_retention(retention: Option<usize>) -> Result<()> {
    match retention {
        Some(r) if r < MIN_RETENTION => {
            Err(Error::Argument(format!("checkpoint retention {r} below the minimum of {MIN_RETENTION} epochs")))
        }
        _ => Ok(()),
    }
}

/// In-memory checkpoint store keyed by epoch.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    retention: Option<usize>,
    checkpoints: BTreeMap<usize, Checkpoint>,
}

impl MemoryStore {
    /// Keep every checkpoint.
    pub fn unbounded() -> Self {
        Self::default()
    }

    /// Keep the most recent `retention` epochs (at least [`MIN_RETENTION`]).
    pub fn with_retention(retention: usize) -> Result<Self> {
        check_retention(Some(retention))?;
        Ok(Self { retention: Some(retention), checkpoints: BTreeMap::new() })
    }

    pub fn get(&self, epoch: usize) -> Option<&Checkpoint> {
        self.checkpoints.get(&epoch)
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.checkpoints.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<usize, Checkpoint> {
        self.checkpoints
    }
}

impl CheckpointSink for MemoryStore {
    fn store(&mut self, checkpoint: Checkpoint) -> Result<String> {
        let epoch = checkpoint.epoch;
        self.checkpoints.insert(epoch, checkpoint);
        if let Some(r) = self.retention {
            while self.checkpoints.len() > r {
                self.checkpoints.pop_first();
            }
        }
        Ok(format!("mem:{epoch}"))
    }
}

/// Writes `epoch_NNNN.snap` files atomically into a directory.
#[derive(Debug, Clone)]
pub struct DirStore {
    dir: PathBuf,
    retention: Option<usize>,
    written: Vec<(usize, PathBuf)>,
}

impl DirStore {
    pub fn new(dir: impl Into<PathBuf>, retention: Option<usize>) -> Result<Self> {
        check_retention(retention)?;
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, retention, written: Vec::new() })
    }

    pub fn path_for(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:04}.snap"))
    }
}

impl CheckpointSink for DirStore {
    fn store(&mut self, checkpoint: Checkpoint) -> Result<String> {
        let path = self.path_for(checkpoint.epoch);
        save_checkpoint(&checkpoint, &path)?;
        self.written.push((checkpoint.epoch, path.clone()));
        if let Some(r) = self.retention {
            while self.written.len() > r {
                let (_, old) = self.written.remove(0);
                std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
        Ok(path.to_string_lossy().into_owned())
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

/// Train in place, handing a checkpoint to `sink` after every epoch.
///
/// Each mini-batch runs forward, mean BCE, backward and one RMSprop step, with
/// the learning rate taken from the cyclic schedule at the global batch
/// counter. Train accuracy is measured on the epoch's own (train-mode)
/// forward passes; validation accuracy in eval mode.
pub fn train_into(
    net: &mut Network<f32>,
    train: &Samples,
    val: Option<&Samples>,
    cfg: &TrainConfig,
    sink: &mut dyn CheckpointSink,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    train.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("training data is empty".into()));
    }
    if let Some(v) = val {
        v.validate()?;
    }
    net.set_seed(cfg.seed);
    let mut state = RmspropState::new(net.param_count(), cfg.rmsprop);
    let mut iteration = 0u64;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        net.set_mode(Mode::Train);
        let order = epoch_order(train.len(), cfg.seed, epoch, cfg.shuffle);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<TensorF32> = chunk.iter().map(|&i| train.inputs[i].clone()).collect();
            let probs = net.forward(&inputs)?;
            let scale = 1.0 / chunk.len() as f64;
            let mut upstream = Vec::with_capacity(chunk.len());
            for (&i, &p) in chunk.iter().zip(&probs) {
                let y = train.labels[i];
                let (loss, grad) = bce_loss(p as f64, y)?;
                if !loss.is_finite() || !(p as f64).is_finite() {
                    return Err(Error::Training {
                        epoch,
                        batch: batch_idx,
                        message: format!("non-finite loss {loss} (p = {p})"),
                    });
                }
                loss_sum += loss;
                hits += usize::from((p as f64 > 0.5) == (y == 1));
                upstream.push(grad * scale);
            }
            let grads = net.backward(&upstream)?;
            if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    batch: batch_idx,
                    message: format!("non-finite gradient at parameter {bad}"),
                });
            }
            let lr = clr_lr(iteration, &cfg.schedule);
            rmsprop_step(net.params_mut(), &grads, &mut state, lr)?;
            iteration += 1;
        }
        let train_loss = loss_sum / train.len() as f64;
        let train_accuracy = hits as f64 / train.len() as f64;

        net.set_mode(Mode::Eval);
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => {
                let ps: Vec<f64> = net.predict(&v.inputs)?.into_iter().map(f64::from).collect();
                Some(accuracy(&ps, &v.labels, 0.5))
            }
            _ => None,
        };
        let checkpoint = sink.store(Checkpoint::capture(net, epoch, train_accuracy, val_accuracy))?;
        history.push(EpochRecord { epoch, train_loss, train_accuracy, val_accuracy, checkpoint });
    }
    Ok(history)
}

/// [`train_into`] with an unbounded in-memory store.
pub fn train(
    net: &mut Network<f32>,
    train_data: &Samples,
    val: Option<&Samples>,
    cfg: &TrainConfig,
) -> Result<(Vec<EpochRecord>, MemoryStore)> {
    let mut store = MemoryStore::unbounded();
    let history = train_into(net, train_data, val, cfg, &mut store)?;
    Ok((history, store))
}
