//! AdamW, cosine annealing, the CE + soft-Dice loss and the training loop.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, Phantom};
use crate::error::{Error, Result};
use crate::kv::KvText;
use crate::metrics::foreground_dice;
use crate::network::{argmax_classes, ForwardCtx, Network};
use crate::params::mix_seed;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Optimiser, schedule and loss settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub ce_weight: f64,
    pub dice_weight: f64,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Where `best.pcck` and `last.pcck` go, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
    /// Runs the loop, validation and bookkeeping without updating parameters.
    pub dry_run: bool,
    /// Ends training after the first epoch whose mean validation Dice reaches this.
    pub stop_at_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            lr_min: 0.0,
            batch_size: 4,
            epochs: 10,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            ce_weight: 1.0,
            dice_weight: 1.0,
            clip_norm: Some(1.0),
            checkpoint_dir: None,
            dry_run: false,
            stop_at_dice: None,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "lr0",
    "lr_min",
    "batch_size",
    "epochs",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "ce_weight",
    "dice_weight",
    "clip_norm",
    "checkpoint_dir",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::config(format!("lr0 = {} must be positive", self.lr0)));
        }
        if !(0.0..=self.lr0).contains(&self.lr_min) {
            return Err(Error::config(format!("lr_min = {} must lie in [0, lr0]", self.lr_min)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config("betas must lie in [0, 1), eps > 0, weight_decay >= 0"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("lr0", self.lr0);
        kv.set("lr_min", self.lr_min);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("weight_decay", self.weight_decay);
        kv.set("beta1", self.betas.0);
        kv.set("beta2", self.betas.1);
        kv.set("eps", self.eps);
        kv.set("seed", self.seed);
        kv.set("ce_weight", self.ce_weight);
        kv.set("dice_weight", self.dice_weight);
        kv.set("clip_norm", self.clip_norm.unwrap_or(0.0));
        if let Some(d) = &self.checkpoint_dir {
            kv.set("checkpoint_dir", d.display());
        }
        kv
    }

    /// Overrides the fields named in `kv`; `clip_norm = 0` turns clipping off.
    pub fn apply_kv(&mut self, kv: &KvText) -> Result<()> {
        kv.apply("lr0", &mut self.lr0)?;
        kv.apply("lr_min", &mut self.lr_min)?;
        kv.apply("batch_size", &mut self.batch_size)?;
        kv.apply("epochs", &mut self.epochs)?;
        kv.apply("weight_decay", &mut self.weight_decay)?;
        kv.apply("beta1", &mut self.betas.0)?;
        kv.apply("beta2", &mut self.betas.1)?;
        kv.apply("eps", &mut self.eps)?;
        kv.apply("seed", &mut self.seed)?;
        kv.apply("ce_weight", &mut self.ce_weight)?;
        kv.apply("dice_weight", &mut self.dice_weight)?;
        if let Some(c) = kv.parsed::<f64>("clip_norm")? {
            self.clip_norm = (c > 0.0).then_some(c);
        }
        if let Some(d) = kv.get("checkpoint_dir") {
            self.checkpoint_dir = Some(PathBuf::from(d));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` at epoch 0 down to `lr_min` at the last epoch.
pub fn cosine_lr(epoch: usize, epochs: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::precondition(format!("epoch {epoch} outside 0..{epochs}")));
    }
    if epochs == 1 {
        return Ok(lr0);
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// First and second moments of every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay.
///
/// A non-finite gradient aborts the step before anything is modified.
pub fn adamw_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::precondition(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.as_f64().is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let t = state.t as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_f64();
        let mut x = p.as_f64();
        x -= lr * cfg.weight_decay * x;
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        x -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        *p = T::lit(x);
    }
    Ok(())
}

/// Scales `grads` so their Euclidean norm is at most `max_norm`; returns the norm before.
pub fn clip_global_norm<T: Real>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().for_each(|g| *g = *g * s);
    }
    norm
}

fn check_labels(labels: &[u8], classes: usize, pixels: usize) -> Result<()> {
    if labels.len() != pixels {
        return Err(Error::precondition(format!(
            "{} labels for {pixels} pixels",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::precondition(format!("label {l} outside 0..{classes}")));
    }
    Ok(())
}

/// `ce_weight * CE + dice_weight * (1 - mean foreground soft Dice)`.
///
/// `logits` is `[K, H, W]`; the soft Dice of each class uses smoothing 1 in
/// numerator and denominator.
pub fn seg_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    labels: &[u8],
    ce_weight: f64,
    dice_weight: f64,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let [k, h, w] = shape[..] else {
        return Err(Error::precondition(format!(
            "logits of shape {shape:?}, expected [K,H,W]"
        )));
    };
    let n = h * w;
    check_labels(labels, k, n)?;
    let flat = tape.reshape(logits, &[k, n])?;
    let logp = tape.log_softmax(flat, 0)?;
    let onehot = Tensor::from_fn(vec![k, n], |i| {
        if labels[i % n] as usize == i / n {
            T::one()
        } else {
            T::zero()
        }
    });
    let onehot = tape.constant(onehot);

    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked)?;
    let ce = tape.scale(total, T::lit(-1.0 / n as f64))?;

    let probs = tape.exp(logp)?;
    let inter = tape.mul(probs, onehot)?;
    let inter = tape.sum_axis(inter, 1)?;
    let psum = tape.sum_axis(probs, 1)?;
    let mut counts = vec![T::zero(); k];
    labels
        .iter()
        .for_each(|&l| counts[l as usize] = counts[l as usize] + T::one());
    let gsum = tape.constant(Tensor::new(vec![k], counts)?);
    let num = tape.scale(inter, T::lit(2.0))?;
    let num = tape.add_scalar(num, T::one())?;
    let den = tape.add(psum, gsum)?;
    let den = tape.add_scalar(den, T::one())?;
    let dice = tape.div(num, den)?;
    let fg = Tensor::from_fn(vec![k], |i| {
        if i == 0 {
            T::zero()
        } else {
            T::lit(1.0 / (k - 1) as f64)
        }
    });
    let fg = tape.constant(fg);
    let dice = tape.mul(dice, fg)?;
    let mean_dice = tape.sum(dice)?;
    let dice_loss = tape.scale(mean_dice, T::lit(-dice_weight))?;
    let dice_loss = tape.add_scalar(dice_loss, T::lit(dice_weight))?;
    let ce = tape.scale(ce, T::lit(ce_weight))?;
    Ok(tape.add(ce, dice_loss)?)
}

/// Loss value of a finished forward pass.
pub fn seg_loss_value<T: Real>(logits: &Tensor<T>, labels: &[u8], ce_weight: f64, dice_weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(logits);
    let l = seg_loss(&mut tape, x, labels, ce_weight, dice_weight)?;
    Ok(tape.value(l)[0].as_f64())
}

/// Loss and flattened parameter gradient of one sample.
pub fn sample_gradient<T: Real>(
    net: &Network<T>,
    image: &Tensor<T>,
    labels: &[u8],
    ctx: &ForwardCtx,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<T>)> {
    let mut tape = Tape::new();
    let p = net.params.bind(&mut tape);
    let x = tape.leaf(image);
    let logits = net.forward_on_tape(&mut tape, &p, x, ctx)?;
    let loss = seg_loss(&mut tape, logits, labels, cfg.ce_weight, cfg.dice_weight)?;
    let value = tape.value(loss)[0].as_f64();
    tape.backward(loss)?;
    Ok((value, net.params.collect_grads(&tape, &p)?))
}

/// Mean loss and mean gradient over a batch.
///
/// Samples run concurrently; the sum is taken in batch order so the result
/// does not depend on the thread count.
pub fn batch_gradient<T: Real>(
    net: &Network<T>,
    batch: &[(&Tensor<T>, &[u8], ForwardCtx)],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<T>)> {
    if batch.is_empty() {
        return Err(Error::precondition("empty batch"));
    }
    let parts: Vec<(f64, Vec<T>)> = batch
        .par_iter()
        .map(|(img, lbl, ctx)| sample_gradient(net, img, lbl, ctx, cfg))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![T::zero(); net.params.numel()];
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
    }
    let s = T::lit(scale);
    grad.iter_mut().for_each(|g| *g = *g * s);
    Ok((loss * scale, grad))
}

/// Validation summary of a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Mean Dice of each foreground class over the samples.
    pub dice: Vec<f64>,
}

impl Evaluation {
    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len().max(1) as f64
    }
}

/// Mean loss and per-class Dice of `net` on the samples at `indices`.
pub fn evaluate<T: Real>(
    net: &Network<T>,
    samples: &[Phantom],
    indices: &[usize],
    ctx: &ForwardCtx,
    cfg: &TrainConfig,
) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::precondition("evaluation split is empty"));
    }
    let k = net.config.num_classes;
    let per: Vec<(f64, Vec<f64>)> = indices
        .par_iter()
        .map(|&i| {
            let s = &samples[i];
            let logits = net.forward(&s.image.cast::<T>(), ctx)?;
            let loss = seg_loss_value(&logits, &s.label, cfg.ce_weight, cfg.dice_weight)?;
            Ok((loss, foreground_dice(&argmax_classes(&logits), &s.label, k)))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mut dice = vec![0.0; k - 1];
    let mut loss = 0.0;
    for (l, d) in &per {
        loss += l;
        dice.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    dice.iter_mut().for_each(|d| *d /= n);
    Ok(Evaluation { loss: loss / n, dice })
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: Vec<f64>,
    /// Euclidean distance between the parameters before and after the epoch.
    pub param_delta: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn mean_val_dice(&self) -> f64 {
        self.val_dice.iter().sum::<f64>() / self.val_dice.len().max(1) as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// First epoch (1-based) whose mean validation Dice reaches `threshold`.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.epochs
            .iter()
            .position(|e| e.mean_val_dice() >= threshold)
            .map(|i| i + 1)
    }

    pub fn best_dice(&self) -> f64 {
        self.epochs
            .iter()
            .map(EpochRecord::mean_val_dice)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Equal up to wall-clock time.
    pub fn same_trajectory(&self, other: &History) -> bool {
        self.len() == other.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                EpochRecord {
                    seconds: 0.0,
                    ..a.clone()
                } == EpochRecord {
                    seconds: 0.0,
                    ..b.clone()
                }
            })
    }

    pub fn to_csv(&self) -> String {
        let k = self.epochs.first().map_or(0, |e| e.val_dice.len());
        let mut s = String::from("epoch,lr,train_loss,val_loss,mean_val_dice");
        for c in 1..=k {
            s.push_str(&format!(",val_dice_{c}"));
        }
        s.push_str(",param_delta,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}",
                e.epoch,
                e.lr,
                e.train_loss,
                e.val_loss,
                e.mean_val_dice()
            ));
            for d in &e.val_dice {
                s.push_str(&format!(",{d}"));
            }
            s.push_str(&format!(",{},{:.3}\n", e.param_delta, e.seconds));
        }
        s
    }
}

/// Result of [`train_loop`].
#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    pub history: History,
    /// Parameters of the epoch with the highest mean validation Dice.
    pub best: Network<T>,
    pub best_epoch: usize,
}

fn l2_distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn save_to(net: &Network<impl Real>, dir: &Option<PathBuf>, name: &str) -> Result<()> {
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        net.save(d.join(name))?;
    }
    Ok(())
}

/// Trains on `train` and validates on `val` after every epoch.
///
/// Batches are reshuffled each epoch from `(seed, epoch)`. A non-finite batch
/// loss stops training with an error; the best checkpoint written so far
/// stays on disk.
pub fn train_on<T: Real>(
    net: &mut Network<T>,
    samples: &[Phantom],
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::precondition(format!(
            "train split has {} and validation split {} samples",
            train.len(),
            val.len()
        )));
    }
    let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.cast::<T>()).collect();
    let eval_ctx = ForwardCtx {
        mask_seed: cfg.seed,
        ..ForwardCtx::default()
    };
    let mut state = AdamState::new(net.params.numel());
    let mut history = History::default();
    let mut best = net.clone();
    let mut best_epoch = 0;
    let mut best_dice = f64::NEG_INFINITY;
    let mut order = train.to_vec();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min)?;
        let before = net.params.flatten();
        order.copy_from_slice(train);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.seed,
            &format!("epoch{epoch}"),
        )));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Tensor<T>, &[u8], ForwardCtx)> = chunk
                .iter()
                .map(|&i| {
                    let ctx = ForwardCtx {
                        mask_seed: mix_seed(cfg.seed, &format!("mask{epoch}:{i}")),
                        ..ForwardCtx::default()
                    };
                    (&images[i], samples[i].label.as_slice(), ctx)
                })
                .collect();
            let (loss, mut grad) = batch_gradient(net, &batch, cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {batches}"
                )));
            }
            loss_sum += loss;
            batches += 1;
            if cfg.dry_run {
                continue;
            }
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grad, c);
            }
            let mut flat = net.params.flatten();
            adamw_step(&mut flat, &grad, &mut state, lr, cfg)?;
            net.params.set_flat(&flat)?;
        }
        let eval = evaluate(net, samples, val, &eval_ctx, cfg)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val_loss: eval.loss,
            val_dice: eval.dice.clone(),
            param_delta: l2_distance(&before, &net.params.flatten()),
            seconds: started.elapsed().as_secs_f64(),
        };
        if record.mean_val_dice() > best_dice {
            best_dice = record.mean_val_dice();
            best_epoch = epoch;
            best = net.clone();
            save_to(net, &cfg.checkpoint_dir, "best.pcck")?;
        }
        let done = cfg.stop_at_dice.is_some_and(|t| record.mean_val_dice() >= t);
        history.epochs.push(record);
        if done {
            break;
        }
    }
    save_to(net, &cfg.checkpoint_dir, "last.pcck")?;
    if let Some(d) = &cfg.checkpoint_dir {
        fs::write(d.join("history.csv"), history.to_csv())?;
    }
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
    })
}

/// [`train_on`] with the dataset's own train / validation split.
pub fn train_loop<T: Real>(net: &mut Network<T>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let split = data.split();
    train_on(net, &data.samples, &split.train, &split.val, cfg)
}

pub fn write_history(history: &History, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, history.to_csv())?;
    Ok(())
}
