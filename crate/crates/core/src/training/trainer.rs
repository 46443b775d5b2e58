//! Epoch loop and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{GridUpdatePolicy, Mode};
use crate::model::Model;
use crate::training::loss::{objective, LossConfig};
use crate::training::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grid_policy: GridUpdatePolicy,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 5,
            seed: 0,
            grid_policy: GridUpdatePolicy::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be a finite non-negative number",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay {} must be a finite non-negative number",
                self.weight_decay
            )));
        }
        if self.loss.lambda < 0.0 {
            return Err(Error::Config("regularization weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Outcome of one epoch. `seconds` is wall-clock; everything else is a
/// deterministic function of the inputs and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub valid_loss: Option<f64>,
    pub valid_accuracy: Option<f64>,
    /// Layers whose grid was extended at the end of the epoch.
    pub grid_updates: Vec<usize>,
    pub seconds: f64,
}

/// Minibatch index lists for one epoch. A trailing batch of one sample is
/// folded into the previous batch so batch statistics stay defined.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().expect("checked");
        batches.last_mut().expect("checked").extend(tail);
    }
    batches
}

/// Optimizer slots belonging to the given layers.
fn param_slots(model: &Model, layers: &[usize]) -> Vec<usize> {
    let mut slots = Vec::new();
    let mut next = 0;
    for (i, layer) in model.layers.iter().enumerate() {
        let n = layer.params().len();
        if layers.contains(&i) {
            slots.extend(next..next + n);
        }
        next += n;
    }
    slots
}

/// One pass over `data`: shuffled minibatches, forward, loss, backward and
/// an Adam step per batch, then the grid update of learnable-activation
/// layers. A zero learning rate freezes the model entirely, grids
/// included. `epoch` is zero-based and only selects the shuffle stream.
pub fn train_epoch(
    model: &mut Model,
    opt: &mut Adam,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let start = Instant::now();
    let frozen = cfg.learning_rate == 0.0;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (b, idx) in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch)
        .into_iter()
        .enumerate()
    {
        let (images, labels) = data.batch(&idx);
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let bindings = model.bind(&mut tape, true);
        let outputs = model.forward(&mut tape, x, &bindings, Mode::Train)?;
        let loss = objective(&mut tape, model, x, &outputs, &bindings, &labels, &cfg.loss)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: b });
        }
        loss_sum += value * labels.len() as f64;
        let preds = tape.value(*outputs.last().expect("non-empty")).argmax_rows()?;
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        if frozen {
            continue;
        }
        model.observe(&tape, x, &outputs)?;
        tape.backward(loss)?;
        model.zero_grads();
        model.write_grads(&tape, &bindings)?;
        opt.step(model.params_mut());
    }
    let grid_updates = if frozen {
        model.reset_observers();
        Vec::new()
    } else {
        let changed = model.grid_update(cfg.grid_policy)?;
        opt.reset_slots(&param_slots(model, &changed));
        changed
    };
    model.zero_grads();
    Ok(EpochStats {
        epoch,
        train_loss: loss_sum / data.len() as f64,
        train_accuracy: correct as f64 / data.len() as f64,
        valid_loss: None,
        valid_accuracy: None,
        grid_updates,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean cross-entropy and predicted classes in evaluation mode.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<(f64, Vec<usize>)> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(idx);
        let out = model.predict(&images)?;
        let mut tape = Tape::new();
        let lp = tape.constant(out.clone());
        let l = tape.cross_entropy(lp, &labels)?;
        loss += tape.value(l).item()? * idx.len() as f64;
        preds.extend(out.argmax_rows()?);
    }
    Ok((loss / data.len() as f64, preds))
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// History of a multi-epoch run.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub epochs: Vec<EpochStats>,
    /// One-based epoch with the best validation accuracy (first on ties).
    pub best_epoch: Option<usize>,
    pub best_valid_accuracy: Option<f64>,
}

/// Trains for up to `cfg.epochs` epochs. With a validation set and a
/// `patience`, stops once validation accuracy has not improved for that
/// many epochs.
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    valid: Option<&Dataset>,
    cfg: &TrainConfig,
    patience: Option<usize>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<FitResult> {
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    for e in 0..cfg.epochs {
        let mut stats = train_epoch(model, &mut opt, train, cfg, e)?;
        stats.epoch = e + 1;
        if let Some(v) = valid {
            let start = Instant::now();
            let (loss, preds) = evaluate(model, v, cfg.batch_size.max(256))?;
            let acc = accuracy(&preds, &v.labels);
            stats.valid_loss = Some(loss);
            stats.valid_accuracy = Some(acc);
            stats.seconds += start.elapsed().as_secs_f64();
            if best.is_none_or(|(_, a)| acc > a) {
                best = Some((e + 1, acc));
            }
        }
        on_epoch(&stats);
        epochs.push(stats);
        if let (Some(p), Some((at, _))) = (patience, best) {
            if e + 1 - at >= p {
                break;
            }
        }
    }
    Ok(FitResult {
        epochs,
        best_epoch: best.map(|b| b.0),
        best_valid_accuracy: best.map(|b| b.1),
    })
}
