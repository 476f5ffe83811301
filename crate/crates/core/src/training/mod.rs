//! Minibatch training with Adam, best-by-validation selection and resumable
//! checkpoints.

mod adam;
mod checkpoint;

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use crate::config::KeyValues;
use crate::dataset::{images_to_tensor, Archive, Sample};
use crate::error::{PanError, Result};
use crate::evaluation::predict;
use crate::layers::Query;
use crate::models::{ForwardOptions, Model, ModelConfig};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: u32,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds both the initial weights and the epoch permutations.
    pub seed: u64,
    pub shuffle: bool,
    pub eval_every: u32,
    /// Stop after this many evaluations without a new best.
    pub patience: Option<u32>,
    pub clip_norm: Option<f32>,
    /// Gradient shards per batch; 1 gives a deterministic single worker.
    pub threads: usize,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 1,
            shuffle: true,
            eval_every: 1,
            patience: None,
            clip_norm: None,
            threads: 1,
            train_data: None,
            val_data: None,
            checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(PanError::config("batch_size must be at least 1"));
        }
        if !(self.adam.learning_rate >= 0.0) || !self.adam.learning_rate.is_finite() {
            return Err(PanError::config("learning_rate must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.epsilon > 0.0) {
            return Err(PanError::config("Adam needs β1, β2 in [0, 1) and ε > 0"));
        }
        if self.eval_every == 0 || self.threads == 0 {
            return Err(PanError::config("eval_every and threads must be positive"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(PanError::config("clip_norm must be positive"));
        }
        Ok(())
    }

    /// Reads model and optimisation keys from one flat config.
    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let model = ModelConfig::from_key_values(&mut kv)?;
        let mut c = TrainConfig::new(model);
        c.epochs = kv.take_or("epochs", c.epochs)?;
        c.batch_size = kv.take_or("batch_size", c.batch_size)?;
        c.adam.learning_rate = kv.take_or("learning_rate", c.adam.learning_rate)?;
        c.adam.beta1 = kv.take_or("beta1", c.adam.beta1)?;
        c.adam.beta2 = kv.take_or("beta2", c.adam.beta2)?;
        c.adam.epsilon = kv.take_or("epsilon", c.adam.epsilon)?;
        c.seed = kv.take_or("seed", c.seed)?;
        c.shuffle = kv.take_or("shuffle", c.shuffle)?;
        c.eval_every = kv.take_or("eval_every", c.eval_every)?;
        c.patience = kv.take("patience")?;
        c.clip_norm = kv.take("clip_norm")?;
        c.threads = kv.take_or("threads", c.threads)?;
        c.train_data = kv.take("train_data")?;
        c.val_data = kv.take("val_data")?;
        c.checkpoint = kv.take("checkpoint")?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = self.model.to_key_values();
        kv.insert("epochs", self.epochs);
        kv.insert("batch_size", self.batch_size);
        kv.insert("learning_rate", self.adam.learning_rate);
        kv.insert("beta1", self.adam.beta1);
        kv.insert("beta2", self.adam.beta2);
        kv.insert("epsilon", self.adam.epsilon);
        kv.insert("seed", self.seed);
        kv.insert("shuffle", self.shuffle);
        kv.insert("eval_every", self.eval_every);
        if let Some(p) = self.patience {
            kv.insert("patience", p);
        }
        if let Some(c) = self.clip_norm {
            kv.insert("clip_norm", c);
        }
        kv.insert("threads", self.threads);
        for (key, path) in [("train_data", &self.train_data), ("val_data", &self.val_data), ("checkpoint", &self.checkpoint)] {
            if let Some(p) = path {
                kv.insert(key, p.display());
            }
        }
        kv
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: u32,
    pub train_loss: f64,
    /// NaN when validation was skipped this epoch.
    pub val_acc: f64,
}

/// `epoch,train_loss,val_acc` with an empty accuracy for skipped evaluations.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_acc\n");
    for h in history {
        let acc = if h.val_acc.is_nan() { String::new() } else { format!("{:.6}", h.val_acc) };
        out.push_str(&format!("{},{:.6},{}\n", h.epoch, h.train_loss, acc));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Best-by-validation state reached in this session, if any evaluation
    /// improved on the starting checkpoint.
    pub best: Option<Checkpoint>,
    /// Loss of every optimisation step, in order.
    pub step_losses: Vec<f32>,
}

impl TrainOutcome {
    pub fn best_or_last(&self) -> &Checkpoint {
        self.best.as_ref().unwrap_or(&self.last)
    }
}

/// Loss and parameter gradients (canonical order) for one batch, split into
/// `shards` pieces reduced in a fixed order.
pub fn batch_gradients(model: &Model, samples: &[&Sample], shards: usize) -> Result<(f32, Vec<Vec<f32>>)> {
    let shards = shards.clamp(1, samples.len().max(1));
    if shards == 1 {
        return shard_gradients(model, samples);
    }
    let per = samples.len().div_ceil(shards);
    let pieces: Vec<&[&Sample]> = samples.chunks(per).collect();
    let results: Vec<Result<(f32, Vec<Vec<f32>>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = pieces.iter().map(|p| s.spawn(|| shard_gradients(model, p))).collect();
        handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
    });
    let total = samples.len() as f32;
    let mut loss = 0.0f32;
    let mut grads: Option<Vec<Vec<f32>>> = None;
    for (piece, r) in pieces.iter().zip(results) {
        let (l, g) = r?;
        let w = piece.len() as f32 / total;
        loss += w * l;
        match grads.as_mut() {
            None => grads = Some(g.into_iter().map(|v| v.into_iter().map(|x| w * x).collect()).collect()),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += w * y);
                }
            }
        }
    }
    Ok((loss, grads.expect("at least one shard")))
}

fn shard_gradients(model: &Model, samples: &[&Sample]) -> Result<(f32, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let images = tape.constant(images_to_tensor(samples)?);
    let queries: Vec<Query> = samples.iter().map(|s| s.query()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.color_label as usize).collect();
    let fwd = model.forward(&mut tape, images, &queries, ForwardOptions::default())?;
    let loss = model.loss(&mut tape, &fwd, &labels)?;
    tape.backward(loss)?;
    let grads = fwd
        .params
        .iter()
        .map(|&p| tape.grad(p).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(p).numel()]))
        .collect();
    Ok((tape.value(loss).data()[0], grads))
}

/// Visiting order of epoch `epoch` (0-based), a pure function of the seed.
pub fn epoch_order(n: usize, seed: u64, epoch: u32, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

/// Fraction of samples whose predicted colour matches the label.
pub fn archive_accuracy(model: &Model, archive: &Archive, threads: usize) -> Result<f64> {
    let out = predict(model, &archive.samples, 64, threads)?;
    let hits = out
        .predictions
        .iter()
        .zip(&archive.samples)
        .filter(|(p, s)| **p == s.color_label as usize)
        .count();
    Ok(hits as f64 / archive.samples.len() as f64)
}

/// Trains from `start` (a fresh checkpoint or a resumed one) until
/// `cfg.epochs` epochs are complete.
pub fn train(cfg: &TrainConfig, train_set: &Archive, val_set: &Archive, start: Option<Checkpoint>) -> Result<TrainOutcome> {
    train_with(cfg, train_set, val_set, start, |_| Ok(()))
}

/// [`train`] with a hook receiving the full training state after each epoch.
pub fn train_with(
    cfg: &TrainConfig,
    train_set: &Archive,
    val_set: &Archive,
    start: Option<Checkpoint>,
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for (name, a) in [("training", train_set), ("validation", val_set)] {
        if a.canvas != cfg.model.input_size {
            return Err(PanError::config(format!(
                "{name} archive has {}×{} images, model expects {}",
                a.canvas, a.canvas, cfg.model.input_size
            )));
        }
        if a.samples.is_empty() {
            return Err(PanError::data(format!("{name} archive is empty")));
        }
    }
    let mut state = match start {
        Some(c) => {
            c.check_config(&cfg.model)?;
            if c.seed != cfg.seed {
                return Err(PanError::config(format!(
                    "checkpoint was trained with seed {}, config says {}",
                    c.seed, cfg.seed
                )));
            }
            c
        }
        None => Checkpoint::fresh(Model::init(&cfg.model, cfg.seed)?, cfg.seed),
    };
    let mut opt = match state.optimizer.take() {
        Some(o) if o.matches(&state.model.tensors()) => o,
        Some(_) => return Err(PanError::config("optimizer state does not match the model")),
        None => AdamState::new(&state.model.tensors()),
    };
    let mut best = None;
    let mut stale = 0u32;
    let mut step_losses = Vec::new();
    while state.epoch < cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(train_set.samples.len(), cfg.seed, state.epoch, cfg.shuffle);
        let mut loss_sum = 0.0f64;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set.samples[i]).collect();
            let (loss, mut grads) = batch_gradients(&state.model, &batch, cfg.threads)?;
            let max_grad = grads.iter().flatten().fold(0.0f32, |m, g| m.max(g.abs()));
            if !loss.is_finite() || !max_grad.is_finite() {
                return Err(PanError::numeric(format!(
                    "non-finite training loss {loss} at epoch {}, batch {bi} (max |grad| {max_grad})",
                    state.epoch + 1
                )));
            }
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut state.model.tensors_mut(), &grads, &mut opt, &cfg.adam)?;
            loss_sum += loss as f64 * batch.len() as f64;
            step_losses.push(loss);
        }
        if let Some(t) = state.model.tensors().iter().position(|t| !t.all_finite()) {
            return Err(PanError::numeric(format!(
                "parameter {} became non-finite in epoch {}",
                state.model.tensor_names()[t],
                state.epoch + 1
            )));
        }
        state.epoch += 1;
        let evaluate = state.epoch % cfg.eval_every == 0 || state.epoch == cfg.epochs;
        let val_acc = if evaluate {
            archive_accuracy(&state.model, val_set, cfg.threads)?
        } else {
            f64::NAN
        };
        let train_loss = loss_sum / train_set.samples.len() as f64;
        state.history.push(EpochRecord {
            epoch: state.epoch,
            train_loss,
            val_acc,
        });
        log::info!(
            "{} epoch {}/{}: loss {train_loss:.4}, val acc {val_acc:.4} ({:.1}s)",
            cfg.model.kind,
            state.epoch,
            cfg.epochs,
            started.elapsed().as_secs_f64()
        );
        let mut snapshot = state.clone();
        snapshot.optimizer = Some(opt.clone());
        let mut stop = false;
        if evaluate {
            if val_acc > state.best_val_acc {
                state.best_val_acc = val_acc;
                state.best_epoch = state.epoch;
                stale = 0;
                snapshot.best_val_acc = val_acc;
                snapshot.best_epoch = state.epoch;
                best = Some(snapshot.clone());
            } else {
                stale += 1;
                stop = cfg.patience.is_some_and(|p| stale >= p);
            }
        }
        on_epoch(&snapshot)?;
        if stop {
            log::info!("early stop after {stale} evaluations without improvement");
            break;
        }
    }
    state.optimizer = Some(opt);
    Ok(TrainOutcome {
        last: state,
        best,
        step_losses,
    })
}
