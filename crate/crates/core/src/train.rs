//! Loss, Adam, the one-cycle schedule and the training loop.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch, common_dims, Sample};
use crate::error::{shape_err, Error, Result};
use crate::grad::Graph;
use crate::model::{backbone_graph, Model};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor5D;

/// Fraction of the schedule spent warming up.
pub const WARMUP_FRACTION: f64 = 0.3;
pub const WARMUP_DIVISOR: f64 = 25.0;
pub const FINAL_DIVISOR: f64 = 1e4;

/// Mean squared difference over all elements, accumulated in f64.
pub fn mse_loss<T: Real>(pred: &Tensor5D<T>, target: &Tensor5D<T>) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(shape_err!("loss operands differ: {} vs {}", pred.dims(), target.dims()));
    }
    if pred.data().is_empty() {
        return Err(Error::Empty("loss over an empty tensor".into()));
    }
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(s / pred.data().len() as f64)
}

/// Linear warmup from `peak/25` to `peak` through step `⌊0.3·total⌋`, then
/// cosine decay to `peak/1e4` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, peak_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Config(format!("step {step} outside a {total_steps}-step schedule")));
    }
    if !(peak_lr >= 0.0 && peak_lr.is_finite()) {
        return Err(Error::Config(format!("peak learning rate must be ≥ 0, got {peak_lr}")));
    }
    let boundary = (WARMUP_FRACTION * total_steps as f64).floor() as usize;
    let start = peak_lr / WARMUP_DIVISOR;
    let end = peak_lr / FINAL_DIVISOR;
    if step == boundary {
        return Ok(peak_lr);
    }
    if step < boundary {
        return Ok(start + (peak_lr - start) * step as f64 / boundary as f64);
    }
    let span = (total_steps - 1 - boundary) as f64;
    let t = (step - boundary) as f64 / span;
    Ok(end + 0.5 * (peak_lr - end) * (1.0 + (PI * t).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

impl AdamState<f32> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut store = ParamStore::new();
        for (prefix, s) in [("m", &self.m), ("v", &self.v)] {
            for (n, a) in s.iter() {
                store.insert(format!("{prefix}.{n}"), a.clone())?;
            }
        }
        store.save(path, &serde_json::json!({ "adam_t": self.t }))
    }

    /// Reads optimizer state that must match `params` entry for entry.
    pub fn load(path: impl AsRef<Path>, params: &ParamStore<f32>) -> Result<Self> {
        let (store, meta) = ParamStore::<f32>::load(path)?;
        let t = meta.get("adam_t").and_then(|v| v.as_u64()).ok_or_else(|| Error::Format("optimizer file has no step".into()))?;
        let mut state = AdamState::new(params);
        for (prefix, s) in [("m", &mut state.m), ("v", &mut state.v)] {
            for (n, a) in s.iter_mut() {
                let src = store.get(&format!("{prefix}.{n}")).map_err(|_| shape_err!("optimizer state lacks {prefix}.{n}"))?;
                if src.shape() != a.shape() {
                    return Err(shape_err!("optimizer state {prefix}.{n} has shape {:?}", src.shape()));
                }
                *a = src.clone();
            }
        }
        if store.len() != 2 * params.len() {
            return Err(shape_err!("optimizer state has {} entries, expected {}", store.len(), 2 * params.len()));
        }
        state.t = t;
        Ok(state)
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.m)?;
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((p, g), (m, v)) in it {
            let g = g.as_f64();
            let mn = cfg.beta1 * m.as_f64() + (1.0 - cfg.beta1) * g;
            let vn = cfg.beta2 * v.as_f64() + (1.0 - cfg.beta2) * g * g;
            *m = T::from_f64(mn);
            *v = T::from_f64(vn);
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + cfg.eps);
            *p = T::from_f64(p.as_f64() - update);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, batch_size: 1, lr: 1e-3, adam: AdamConfig::default(), seed: 0, val_fraction: 0.05 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be ≥ 0, got {}", self.lr)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("validation fraction {} not in (0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    /// Optimizer steps per epoch for `n_train` training samples.
    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }
}

/// Seeded disjoint split: `max(1, round(frac·n))` validation indices.
pub fn split_indices(n: usize, frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Empty(format!("need at least two samples to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((frac * n as f64).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_loss_csv<W: Write>(mut out: W, log: &[LossRecord]) -> Result<()> {
    writeln!(out, "epoch,split,loss,lr")?;
    for r in log {
        let split = match r.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        writeln!(out, "{},{split},{},{}", r.epoch, r.loss, r.lr)?;
    }
    Ok(())
}

/// Step-level training state for one model.
pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    pub state: AdamState<f32>,
    /// Optimizer steps taken so far, across resumes.
    pub step: usize,
    pub total_steps: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        if total_steps == 0 {
            return Err(Error::Config("schedule has no steps".into()));
        }
        let state = AdamState::new(&model.params);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20b);
        Ok(Trainer { model, cfg, state, step: 0, total_steps, rng })
    }

    /// Continues a schedule at `step` with restored optimizer state.
    pub fn resume(mut self, step: usize, state: AdamState<f32>) -> Result<Self> {
        self.model.params.check_compatible(&state.m)?;
        if step > self.total_steps {
            return Err(Error::Config(format!("resume step {step} beyond the {}-step schedule", self.total_steps)));
        }
        self.rng = ChaCha8Rng::seed_from_u64((self.cfg.seed ^ 0x5eed_d20b).wrapping_add(step as u64));
        self.step = step;
        self.state = state;
        Ok(self)
    }

    pub fn current_lr(&self) -> Result<f64> {
        one_cycle_lr(self.step.min(self.total_steps - 1), self.total_steps, self.cfg.lr)
    }

    /// Loss and parameter gradients for one batch, in network units.
    pub fn loss_and_grads(&mut self, samples: &[&Sample], training: bool) -> Result<(f64, ParamStore<f32>)> {
        let (x, y) = batch(samples)?;
        let mut g = Graph::new();
        let xv = g.constant(self.model.to_network(&x).into_array());
        let yv = g.constant(self.model.to_network(&y).into_array());
        let vars = self.model.leaves(&mut g);
        let rng = if training { Some(&mut self.rng) } else { None };
        let pred = backbone_graph(&mut g, xv, &self.model.config, &vars, rng)?;
        let loss = g.mse(pred, yv)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
        }
        Ok((value, g.backward(loss)?.params()))
    }

    /// One optimizer step on `samples`; returns the batch loss.
    pub fn step(&mut self, samples: &[&Sample]) -> Result<f64> {
        let lr = one_cycle_lr(self.step, self.total_steps, self.cfg.lr)?;
        let (loss, grads) = self.loss_and_grads(samples, true)?;
        adam_step(&mut self.model.params, &grads, &mut self.state, lr, &self.cfg.adam)?;
        self.step += 1;
        Ok(loss)
    }

    /// Mean inference-mode loss over `samples`.
    pub fn evaluate(&self, samples: &[&Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty("nothing to evaluate".into()));
        }
        let mut total = 0.0;
        for s in samples {
            let pred = self.model.forward(&s.input, None)?;
            total += mse_loss(&self.model.to_network(&pred), &self.model.to_network(&s.target))?;
        }
        Ok(total / samples.len() as f64)
    }

    pub fn save(&self, model_path: impl AsRef<Path>, optimizer_path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({ "step": self.step, "total_steps": self.total_steps });
        self.model.save(model_path, meta)?;
        self.state.save(optimizer_path)
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    /// Parameters at the lowest validation loss.
    pub best: Model<f32>,
    pub best_val: f64,
    pub best_epoch: usize,
    pub trainer: Trainer,
    pub log: Vec<LossRecord>,
}

/// Epoch loop over a seeded split of `dataset`. `on_epoch` sees the trainer
/// and the records of each finished epoch.
pub fn train(
    model: Model<f32>,
    dataset: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Trainer, &[LossRecord]) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    common_dims(dataset)?;
    let (train_idx, val_idx) = split_indices(dataset.len(), cfg.val_fraction, cfg.seed)?;
    let per_epoch = cfg.steps_per_epoch(train_idx.len());
    let trainer = Trainer::new(model, cfg.clone(), cfg.epochs * per_epoch)?;
    run_epochs(trainer, dataset, &train_idx, &val_idx, 0, &mut on_epoch)
}

/// Continues a trainer from the epoch implied by its step counter.
pub fn train_from(
    trainer: Trainer,
    dataset: &[Sample],
    mut on_epoch: impl FnMut(&Trainer, &[LossRecord]) -> Result<()>,
) -> Result<TrainOutcome> {
    common_dims(dataset)?;
    let cfg = trainer.cfg.clone();
    let (train_idx, val_idx) = split_indices(dataset.len(), cfg.val_fraction, cfg.seed)?;
    let per_epoch = cfg.steps_per_epoch(train_idx.len());
    if trainer.total_steps != cfg.epochs * per_epoch || trainer.step % per_epoch != 0 {
        return Err(Error::Config(format!(
            "step {} does not fall on an epoch boundary of a {}-step schedule",
            trainer.step, trainer.total_steps
        )));
    }
    let start = trainer.step / per_epoch;
    run_epochs(trainer, dataset, &train_idx, &val_idx, start, &mut on_epoch)
}

fn run_epochs(
    mut trainer: Trainer,
    dataset: &[Sample],
    train_idx: &[usize],
    val_idx: &[usize],
    start_epoch: usize,
    on_epoch: &mut dyn FnMut(&Trainer, &[LossRecord]) -> Result<()>,
) -> Result<TrainOutcome> {
    let cfg = trainer.cfg.clone();
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &dataset[i]).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    for epoch in start_epoch..cfg.epochs {
        let mut order = train_idx.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + epoch as u64)));
        let mut sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            lr = trainer.current_lr()?;
            sum += trainer.step(&samples)? * chunk.len() as f64;
        }
        let train_loss = sum / order.len() as f64;
        let val_loss = trainer.evaluate(&val)?;
        let records = [
            LossRecord { epoch, split: Split::Train, loss: train_loss, lr },
            LossRecord { epoch, split: Split::Val, loss: val_loss, lr },
        ];
        log.extend(records);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, trainer.model.clone()));
        }
        on_epoch(&trainer, &records)?;
    }
    let (best_val, best_epoch, best) = match best {
        Some(b) => b,
        None => {
            let v = trainer.evaluate(&val)?;
            (v, start_epoch, trainer.model.clone())
        }
    };
    Ok(TrainOutcome { best, best_val, best_epoch, trainer, log })
}
