//! Mini-batch training loop shared by both predictors.
//!
//! Per-sample gradients are summed in fixed-size chunks whose boundaries do
//! not depend on the thread count, then the chunk sums are added in order.
//! Sequential and parallel execution therefore produce bitwise-identical
//! parameters for the same seed.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::ConfusionCounts;
use crate::nn::loss::bce_with_logit;
use crate::nn::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::nn::params::ParamSet;
use crate::rng::{mix_seed, rng_from_seed, Rng};

const GRAD_CHUNK: usize = 16;

/// A model emitting one logit per input, trained with (weighted) BCE.
pub trait BinaryModel: Sync {
    type Input: Sync;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Training-mode forward and backward for one example. Adds the
    /// gradient of `weight · BCE(σ(logit), target)` into `grads` and returns
    /// that loss. Dropout masks come from `rng`.
    fn accumulate_grad(
        &self,
        input: &Self::Input,
        target: f64,
        weight: f64,
        rng: &mut Rng,
        grads: &mut ParamSet,
    ) -> f64;

    /// Evaluation-mode logit (dropout off).
    fn logit(&self, input: &Self::Input) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub optim: AdamWConfig,
    pub seed: u64,
    /// `(weight for label 0, weight for label 1)`.
    pub class_weights: (f64, f64),
    pub exec: Exec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_f1,selected\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                e.train_loss,
                e.val_loss,
                e.val_f1,
                (Some(e.epoch) == self.best_epoch) as u8
            ));
        }
        out
    }
}

/// Hard label at probability threshold 0.5.
pub fn predict_label(logit: f64) -> bool {
    logit >= 0.0
}

/// `(mean unweighted BCE, confusion counts)` of `model` on a labelled set.
pub fn evaluate<M: BinaryModel>(model: &M, xs: &[M::Input], ys: &[bool], exec: Exec) -> (f64, ConfusionCounts) {
    let logits = exec.map(xs, |x| model.logit(x));
    let mut loss = 0.0;
    for (&z, &y) in logits.iter().zip(ys) {
        loss += bce_with_logit(z, y as u8 as f64, 1.0).0;
    }
    let preds: Vec<bool> = logits.iter().map(|&z| predict_label(z)).collect();
    let counts = ConfusionCounts::from_predictions(&preds, ys);
    (loss / xs.len().max(1) as f64, counts)
}

/// Trains `model` in place and keeps the parameters of the epoch with the
/// best validation F1 (ties broken by lower validation loss). With zero
/// epochs the model is left untouched.
pub fn fit<M: BinaryModel>(
    model: &mut M,
    train_x: &[M::Input],
    train_y: &[bool],
    val_x: &[M::Input],
    val_y: &[bool],
    settings: &TrainSettings,
) -> Result<TrainLog> {
    settings.optim.validate()?;
    if train_x.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if train_x.len() != train_y.len() || val_x.len() != val_y.len() {
        return Err(Error::Contract("inputs and labels differ in length".into()));
    }
    let mut log = TrainLog::default();
    if settings.optim.epochs == 0 {
        return Ok(log);
    }

    let mut opt = AdamW::new(settings.optim, model.params());
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut best: Option<(f64, f64, ParamSet)> = None;
    let (w0, w1) = settings.class_weights;

    for epoch in 0..settings.optim.epochs {
        let epoch_seed = mix_seed(settings.seed, epoch as u64);
        order.shuffle(&mut rng_from_seed(epoch_seed));
        let mut epoch_loss = 0.0;

        for (b, batch) in order.chunks(settings.optim.batch_size).enumerate() {
            let batch_seed = mix_seed(epoch_seed, b as u64 + 1);
            let model_ref = &*model;
            let partials = settings.exec.map_chunks(batch, GRAD_CHUNK, |ci, chunk| {
                let mut grads = model_ref.params().zeros_like();
                let mut loss = 0.0;
                for (k, &i) in chunk.iter().enumerate() {
                    let pos = (ci * GRAD_CHUNK + k) as u64;
                    let mut rng = rng_from_seed(mix_seed(batch_seed, pos));
                    let y = train_y[i];
                    let w = if y { w1 } else { w0 };
                    loss += model_ref.accumulate_grad(&train_x[i], y as u8 as f64, w, &mut rng, &mut grads);
                }
                (loss, grads)
            });
            let mut parts = partials.into_iter();
            let (mut loss, mut grads) = parts.next().expect("non-empty batch");
            for (l, g) in parts {
                loss += l;
                grads.add_assign(&g);
            }
            let inv = 1.0 / batch.len() as f64;
            loss *= inv;
            grads.scale(inv);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {b}"
                )));
            }
            if let Some(max) = settings.optim.grad_clip_norm {
                clip_grad_norm(&mut grads, max);
            }
            opt.step(model.params_mut(), &grads)?;
            epoch_loss += loss * batch.len() as f64;
        }

        let (val_loss, counts) = evaluate(&*model, val_x, val_y, settings.exec);
        let val_f1 = counts.prf1().2;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / train_x.len() as f64,
            val_loss,
            val_f1,
        });
        let better = match &best {
            None => true,
            Some((f1, vl, _)) => val_f1 > *f1 || (val_f1 == *f1 && val_loss < *vl),
        };
        if better {
            best = Some((val_f1, val_loss, model.params().clone()));
            log.best_epoch = Some(epoch);
        }
    }
    if let Some((_, _, params)) = best {
        *model.params_mut() = params;
    }
    Ok(log)
}
