//! Task-model optimisation and evaluation.

mod metrics;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{
    auc, auc_report, bootstrap_ci, confusion_matrix, masked_rmse, rmse_report, ErrorTally, MetricReport, DEFAULT_LEVEL,
    DEFAULT_N_BOOT,
};

use crate::autograd::optim::{Optimizer, OptimizerKind};
use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::data::{make_batches, make_bucketed_batches, Batch, BatchTargets, TaskSample};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, masked_mse};
use crate::seqmodels::{reduce_last_step, Task, TaskModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub optimizer: OptimizerKind,
    /// Joint gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Group training batches by sequence length (pools of this many
    /// batches) to reduce padding; 0 disables bucketing.
    pub bucket_pool: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            early_stop_patience: 10,
            optimizer: OptimizerKind::AdaptiveMoment,
            clip_norm: None,
            bucket_pool: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// A model trained by [`train_supervised`].
pub trait Supervised {
    fn task(&self) -> Task;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Per-step outputs, `(batch * t_max) x task.output_dim()`.
    fn outputs(&self, tape: &mut Tape, batch: &Batch) -> Var;
    /// Bias of the output layer.
    fn output_bias(&self) -> ParamId;
    /// Extra training-only loss term.
    fn penalty(&self, _tape: &mut Tape) -> Option<Var> {
        None
    }
}

impl Supervised for TaskModel {
    fn task(&self) -> Task {
        self.task
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn outputs(&self, tape: &mut Tape, batch: &Batch) -> Var {
        self.forward(tape, batch)
    }

    fn output_bias(&self) -> ParamId {
        self.head.b
    }
}

/// Task loss of one batch and the weight it carries in a dataset mean
/// (target steps for SOFA, records for IHM).
pub fn task_loss<M: Supervised + ?Sized>(model: &M, tape: &mut Tape, batch: &Batch) -> Result<(Var, f64)> {
    let out = model.outputs(tape, batch);
    match (&batch.targets, model.task()) {
        (BatchTargets::Sofa { values, mask }, Task::Sofa) => {
            let n = values.len();
            let target = values.clone().into_shape_with_order((n, 1)).expect("contiguous");
            let mask = mask.clone().into_shape_with_order((n, 1)).expect("contiguous");
            let weight = mask.sum();
            Ok((masked_mse(tape, out, &target, &mask), weight))
        }
        (BatchTargets::Ihm { labels }, Task::Ihm) => {
            let logits = reduce_last_step(tape, out, batch);
            Ok((cross_entropy(tape, logits, labels, None), labels.len() as f64))
        }
        (_, task) => Err(Error::data(format!("batch targets do not match task {task:?}"))),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean task loss over each epoch's training batches, weighted by target count.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mean task loss over `samples` in evaluation mode.
pub fn dataset_loss<M: Supervised + ?Sized>(model: &M, samples: &[TaskSample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut weight = 0.0;
    for batch in make_batches(samples, batch_size, None)? {
        let mut tape = Tape::new();
        let (loss, w) = task_loss(model, &mut tape, &batch)?;
        total += tape.scalar(loss) * w;
        weight += w;
    }
    Ok(if weight > 0.0 { total / weight } else { f64::NAN })
}

/// Mean SOFA target over the samples, or `None` for other targets.
pub(crate) fn mean_target(samples: &[TaskSample]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        if let crate::data::Target::Sofa(v) = &s.target {
            sum += v.iter().sum::<f64>();
            n += v.len();
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Minibatch training with early stopping on validation loss.
///
/// For SOFA the output bias starts at the mean training target. The
/// parameters of the best validation epoch are restored at the end (the
/// validation objective includes the model penalty, if any); with
/// an empty validation set the last epoch is kept.
pub fn train_supervised<M: Supervised + ?Sized>(
    model: &mut M,
    train: &[TaskSample],
    val: &[TaskSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    if model.task() == Task::Sofa {
        if let Some(mean) = mean_target(train) {
            let b = model.output_bias();
            model.params_mut().get_mut(b).fill(mean);
        }
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, model.params());
    if let Some(c) = cfg.clip_norm {
        opt = opt.with_clip_norm(c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut weight = 0.0;
        for batch in epoch_batches(train, cfg, rng.random())? {
            let mut tape = Tape::training(ChaCha8Rng::seed_from_u64(rng.random()));
            let (loss, w) = task_loss(model, &mut tape, &batch)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step, detail: format!("task loss {value}") });
            }
            let full = match model.penalty(&mut tape) {
                Some(p) => {
                    let pv = tape.scalar(p);
                    if !pv.is_finite() {
                        return Err(Error::Diverged { epoch, step, detail: format!("penalty {pv}") });
                    }
                    tape.add(loss, p)
                }
                None => loss,
            };
            let grads = tape.backward(full).for_store(model.params());
            opt.step(model.params_mut(), &grads);
            total += value * w;
            weight += w;
            step += 1;
        }
        history.train_loss.push(total / weight.max(f64::MIN_POSITIVE));
        if val.is_empty() {
            history.best_epoch = epoch;
            continue;
        }
        let v = dataset_loss(model, val, cfg.batch_size)? + penalty_value(model);
        if !v.is_finite() {
            return Err(Error::Diverged { epoch, step, detail: format!("validation loss {v}") });
        }
        history.val_loss.push(v);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, model.params().clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        restore(model.params_mut(), &params);
    }
    Ok(history)
}

fn penalty_value<M: Supervised + ?Sized>(model: &M) -> f64 {
    let mut tape = Tape::new();
    model.penalty(&mut tape).map_or(0.0, |p| tape.scalar(p))
}

/// Training batches for one epoch, bucketed by length when configured.
pub fn epoch_batches(samples: &[TaskSample], cfg: &TrainConfig, seed: u64) -> Result<Vec<Batch>> {
    if cfg.bucket_pool == 0 {
        Ok(make_batches(samples, cfg.batch_size, Some(seed))?.collect())
    } else {
        make_bucketed_batches(samples, cfg.batch_size, cfg.bucket_pool, seed)
    }
}

/// Copy values from `src` into `dst`, keeping `dst`'s identity.
pub fn restore(dst: &mut ParamStore, src: &ParamStore) {
    for id in src.ids() {
        dst.get_mut(id).assign(src.get(id));
    }
}

/// Train a task model; see [`train_supervised`].
pub fn train_task(model: &mut TaskModel, train: &[TaskSample], val: &[TaskSample], cfg: &TrainConfig) -> Result<TrainHistory> {
    train_supervised(model, train, val, cfg)
}

/// Probability of the positive class per IHM sample.
pub fn predict_ihm<M: Supervised + ?Sized>(model: &M, samples: &[TaskSample], batch_size: usize) -> Result<Vec<f64>> {
    let mut probs = vec![0.0; samples.len()];
    for batch in make_batches(samples, batch_size, None)? {
        let mut tape = Tape::new();
        let out = model.outputs(&mut tape, &batch);
        let logits = reduce_last_step(&mut tape, out, &batch);
        let lp = tape.log_softmax(logits);
        for (row, i) in tape.value(lp).rows().into_iter().zip(&batch.indices) {
            probs[*i] = row[1].exp();
        }
    }
    Ok(probs)
}

/// Per-step SOFA predictions, one vector per sample over its valid steps.
pub fn predict_sofa<M: Supervised + ?Sized>(model: &M, samples: &[TaskSample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut preds = vec![Vec::new(); samples.len()];
    for batch in make_batches(samples, batch_size, None)? {
        let mut tape = Tape::new();
        let out = model.outputs(&mut tape, &batch);
        let v = tape.value(out);
        let t = batch.t_max();
        for (b, i) in batch.indices.iter().enumerate() {
            preds[*i] = (0..batch.lengths[b]).map(|s| v[[b * t + s, 0]]).collect();
        }
    }
    Ok(preds)
}

/// Per-record squared-error tallies of SOFA predictions.
pub fn sofa_tallies(samples: &[TaskSample], preds: &[Vec<f64>]) -> Vec<ErrorTally> {
    samples
        .iter()
        .zip(preds)
        .map(|(s, p)| match &s.target {
            crate::data::Target::Sofa(y) => ErrorTally {
                sse: y.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum(),
                count: y.len().min(p.len()),
            },
            _ => ErrorTally::default(),
        })
        .collect()
}

/// Test metric with a bootstrap interval: AUC for IHM, masked RMSE for SOFA.
pub fn evaluate<M: Supervised + ?Sized>(
    model: &M,
    samples: &[TaskSample],
    batch_size: usize,
    n_boot: usize,
    seed: u64,
) -> Result<MetricReport> {
    match model.task() {
        Task::Ihm => {
            let probs = predict_ihm(model, samples, batch_size)?;
            let labels: Vec<bool> =
                samples.iter().map(|s| matches!(s.target, crate::data::Target::Ihm(true))).collect();
            auc_report("auc", &probs, &labels, n_boot, seed)
        }
        Task::Sofa => {
            let preds = predict_sofa(model, samples, batch_size)?;
            rmse_report("rmse", &sofa_tallies(samples, &preds), n_boot, seed)
        }
    }
}

/// Dense `records x t_max` prediction, target and mask matrices for SOFA samples.
pub fn sofa_matrices(samples: &[TaskSample], preds: &[Vec<f64>]) -> (Array2<f64>, Array2<f64>, Array2<bool>) {
    let t = samples.iter().map(TaskSample::len).max().unwrap_or(0);
    let mut p = Array2::zeros((samples.len(), t));
    let mut y = Array2::zeros((samples.len(), t));
    let mut m = Array2::from_elem((samples.len(), t), false);
    for (i, (s, pr)) in samples.iter().zip(preds).enumerate() {
        if let crate::data::Target::Sofa(v) = &s.target {
            for (j, (a, b)) in v.iter().zip(pr).enumerate() {
                y[[i, j]] = *a;
                p[[i, j]] = *b;
                m[[i, j]] = true;
            }
        }
    }
    (p, y, m)
}
