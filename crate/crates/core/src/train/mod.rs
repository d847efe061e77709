//! Deterministic single-threaded training of the micro ViT.

pub mod data;
pub mod loss;
pub mod optim;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result, TensorError};
use crate::init::seeded_rng;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::vit::{init_weights, vit_forward, vit_on_tape, ViTConfig, ViTWeights};

pub use data::{synth_dataset, Dataset, SplitDataset};
pub use loss::cross_entropy;
pub use optim::{adamw_step, AdamState, Schedule, TrainHyper};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub ms_per_batch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    /// Mean loss over the last `k` steps.
    pub fn final_loss(&self, k: usize) -> Option<f64> {
        let k = k.min(self.steps.len());
        if k == 0 {
            return None;
        }
        let tail = &self.steps[self.steps.len() - k..];
        Some(tail.iter().map(|s| s.loss).sum::<f64>() / k as f64)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_accuracy)
    }

    /// Equal losses, learning rates and accuracies; wall-clock ignored.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.epochs == other.epochs
            && self.steps.len() == other.steps.len()
            && self
                .steps
                .iter()
                .zip(&other.steps)
                .all(|(a, b)| a.step == b.step && a.loss.to_bits() == b.loss.to_bits() && a.lr == b.lr)
    }

    /// One JSON object per line: step records, then epoch records.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Everything mutable during training.
pub struct Trainer<T: Scalar> {
    pub cfg: ViTConfig,
    pub hyper: TrainHyper,
    pub weights: ViTWeights<T>,
    state: AdamState<T>,
    decay: Vec<bool>,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &ViTConfig, hyper: &TrainHyper) -> Result<Self> {
        cfg.validate()?;
        hyper.validate()?;
        let weights = init_weights::<T>(cfg, hyper.seed);
        let state = AdamState::new(&weights.params());
        let decay = weights.param_kinds().iter().map(|k| k.decays()).collect();
        Ok(Trainer { cfg: cfg.clone(), hyper: hyper.clone(), weights, state, decay, step: 0 })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Forward, backward and one AdamW update; returns the batch loss.
    pub fn step(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let next = self.step + 1;
        let diverged = |e: TensorError| match e {
            TensorError::NonFinite { .. } => Error::Diverged { step: next, loss: f64::NAN },
            other => other.into(),
        };
        let (loss, grads) = loss_and_grads(&self.cfg, &self.weights, images, labels).map_err(|e| match e {
            Error::Tensor(t) => diverged(t),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: next, loss });
        }
        let lr = self.hyper.lr_at(next);
        let mut params = self.weights.params_mut();
        adamw_step(&mut params, &grads, &self.decay, &mut self.state, &self.hyper, lr, next)?;
        if params.iter().any(|p| p.ensure_finite("adamw").is_err()) {
            return Err(Error::Diverged { step: next, loss });
        }
        self.step = next;
        Ok(loss)
    }
}

/// Mean cross-entropy and its gradient for every parameter, in
/// [`ViTWeights::named_params`] order.
pub fn loss_and_grads<T: Scalar>(
    cfg: &ViTConfig,
    weights: &ViTWeights<T>,
    images: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let vars = weights.register(&mut tape);
    let logits = vit_on_tape(&mut tape, cfg, &vars, images)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).item().to_f64();
    Ok((value, vars.all().into_iter().map(|v| grads.wrt(v)).collect()))
}

/// Fraction of `ds` classified correctly.
pub fn evaluate<T: Scalar>(cfg: &ViTConfig, weights: &ViTWeights<T>, ds: &Dataset) -> Result<f64> {
    const EVAL_BATCH: usize = 128;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (images, labels) = ds.batch::<T>(chunk);
        let logits = vit_forward(cfg, weights, &images)?;
        let c = logits.last_dim();
        for (row, &label) in logits.data().chunks(c).zip(&labels) {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / ds.len().max(1) as f64)
}

#[derive(Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub log: TrainLog,
    pub weights: ViTWeights<T>,
}

/// Trains for `hyper.steps` steps over shuffled epochs of `data.train`,
/// evaluating on `data.val` after every epoch and at the end. Writes a
/// checkpoint to `checkpoint` when given.
pub fn train_loop<T: Scalar>(
    cfg: &ViTConfig,
    hyper: &TrainHyper,
    data: &SplitDataset,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    let train = &data.train;
    let ok_shape = train.channels() == cfg.in_channels && train.image_size() == cfg.image_size;
    if !ok_shape || train.classes > cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset ({} ch, {}px, {} classes) does not fit model ({} ch, {}px, {} classes)",
            train.channels(),
            train.image_size(),
            train.classes,
            cfg.in_channels,
            cfg.image_size,
            cfg.num_classes
        )));
    }
    if train.len() < hyper.batch_size {
        return Err(Error::InsufficientData(format!(
            "{} training samples for batch size {}",
            train.len(),
            hyper.batch_size
        )));
    }
    let mut trainer = Trainer::<T>::new(cfg, hyper)?;
    let mut rng = seeded_rng(hyper.seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let per_epoch = train.len() / hyper.batch_size;
    let mut log = TrainLog::default();
    let mut epoch = 0;
    while trainer.steps_taken() < hyper.steps {
        order.shuffle(&mut rng);
        for batch in order.chunks_exact(hyper.batch_size).take(per_epoch) {
            if trainer.steps_taken() == hyper.steps {
                break;
            }
            let (images, labels) = train.batch::<T>(batch);
            let started = Instant::now();
            let loss = trainer.step(&images, &labels)?;
            let ms = started.elapsed().as_secs_f64() * 1e3;
            let step = trainer.steps_taken();
            log.steps.push(StepRecord { step, loss, lr: hyper.lr_at(step), ms_per_batch: ms });
        }
        epoch += 1;
        let val_accuracy = evaluate(cfg, &trainer.weights, &data.val)?;
        log.epochs.push(EpochRecord { epoch, step: trainer.steps_taken(), val_accuracy });
    }
    if let Some(path) = checkpoint {
        save_checkpoint(path, cfg, &trainer.weights)?;
    }
    Ok(TrainOutcome { log, weights: trainer.weights })
}
