use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use super::{train_step, Hyperparams, Method, PeerPair, StepMetrics, StepSettings};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::variational::{self, BnnModel};

/// Two-stage schedule. Decay epochs count from the start of their own stage,
/// and the learning rate resets to `lr` when stage 2 begins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr: f64,
    pub stage1_decay: Vec<usize>,
    pub stage2_decay: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
}

impl Default for Schedule {
    /// 40 + 20 epochs with decays at the same relative points as 200 + 100.
    fn default() -> Self {
        Schedule {
            stage1_epochs: 40,
            stage2_epochs: 20,
            lr: 1e-3,
            stage1_decay: vec![16, 24, 32, 36],
            stage2_decay: vec![6, 12, 18],
            decay_factor: 10.0,
            batch_size: 64,
        }
    }
}

impl Schedule {
    /// Learning rate for epoch `epoch` (0-based) of `stage` (1 or 2).
    pub fn lr_at(&self, stage: u8, epoch: usize) -> f64 {
        let decays = if stage == 1 { &self.stage1_decay } else { &self.stage2_decay };
        let n = decays.iter().filter(|&&d| epoch >= d).count();
        self.lr / self.decay_factor.powi(n as i32)
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }
}

/// Epoch means of the step metrics plus validation accuracy of each peer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub method: Method,
    pub stage: u8,
    /// 0-based, counted across both stages.
    pub epoch: usize,
    pub lr: f64,
    pub elbo_b1: f64,
    pub elbo_b2: f64,
    pub logit_kl_b1: Option<f64>,
    pub logit_kl_b2: Option<f64>,
    pub d_param: f64,
    pub feat_kl_b1: Option<f64>,
    pub feat_kl_b2: Option<f64>,
    pub loss_b1: f64,
    pub loss_b2: f64,
    pub val_acc_b1: f64,
    pub val_acc_b2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub history: Vec<EpochRecord>,
    /// Set when a step produced a non-finite value; `history` then ends at the last good epoch.
    pub failure: Option<String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn mean_opt(steps: &[StepMetrics], f: impl Fn(&StepMetrics) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = steps.iter().map(f).collect();
    vals.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
}

/// Accuracy of the posterior-mean network.
pub fn mean_accuracy(model: &BnnModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let (logits, _) = variational::forward_values(model, &data.x, &model.mean_noise())?;
    let correct = logits
        .rows()
        .zip(&data.y)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs both stages of `method`. Validation falls back to the training set when `val` is empty.
pub fn run_training(
    pair: &mut PeerPair,
    train: &Dataset,
    val: &Dataset,
    hyper: &Hyperparams,
    schedule: &Schedule,
    method: Method,
    rng: &mut Rng,
) -> Result<TrainingRun> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if schedule.batch_size == 0 {
        return Err(Error::config("schedule.batch_size", "must be positive"));
    }
    hyper.validate()?;
    let val = if val.is_empty() { train } else { val };
    let mut history = Vec::with_capacity(schedule.total_epochs());
    let stages = [(1u8, schedule.stage1_epochs), (2u8, schedule.stage2_epochs)];
    let mut global = 0;
    for (stage, epochs) in stages {
        for e in 0..epochs {
            let lr = schedule.lr_at(stage, e);
            let settings = StepSettings::for_method(hyper, method, stage, lr);
            let mut steps = Vec::new();
            for batch in train.epoch_batches(schedule.batch_size, rng) {
                match train_step(pair, &batch, &settings, hyper.fusion.tokens, train.len(), rng) {
                    Ok(m) => steps.push(m),
                    Err(err @ (Error::NonFinite(_) | Error::Domain { .. })) => {
                        let msg = format!("{} stage {stage} epoch {global}: {err}", method.as_str());
                        warn!("{msg}");
                        return Ok(TrainingRun { history, failure: Some(msg) });
                    }
                    Err(err) => return Err(err),
                }
            }
            let record = EpochRecord {
                method,
                stage,
                epoch: global,
                lr,
                elbo_b1: mean(steps.iter().map(|s| s.elbo[0])),
                elbo_b2: mean(steps.iter().map(|s| s.elbo[1])),
                logit_kl_b1: mean_opt(&steps, |s| s.logit_kl[0]),
                logit_kl_b2: mean_opt(&steps, |s| s.logit_kl[1]),
                d_param: mean(steps.iter().map(|s| s.d_param)),
                feat_kl_b1: mean_opt(&steps, |s| s.feat_kl[0]),
                feat_kl_b2: mean_opt(&steps, |s| s.feat_kl[1]),
                loss_b1: mean(steps.iter().map(|s| s.loss[0])),
                loss_b2: mean(steps.iter().map(|s| s.loss[1])),
                val_acc_b1: mean_accuracy(&pair.b1.model, val)?,
                val_acc_b2: mean_accuracy(&pair.b2.model, val)?,
            };
            debug!(
                "{} stage {stage} epoch {global}: loss {:.4}/{:.4} d_param {:.4} val {:.3}/{:.3}",
                method.as_str(),
                record.loss_b1,
                record.loss_b2,
                record.d_param,
                record.val_acc_b1,
                record.val_acc_b2
            );
            history.push(record);
            global += 1;
        }
    }
    if let Some(last) = history.last() {
        info!("{} finished: val acc {:.3}/{:.3}", method.as_str(), last.val_acc_b1, last.val_acc_b2);
    }
    Ok(TrainingRun { history, failure: None })
}
