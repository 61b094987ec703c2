//! Optimizers, the training loop with early stopping, and evaluation.

mod experiment;
mod outputs;

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capsnet::predict;
use crate::checkpoint::CheckpointError;
use crate::data::{batch_indices, DataError, EncodedRecord};
use crate::metrics::{ConfusionMatrix, Metrics, MetricsError};
use crate::model::{Model, ModelError};
use crate::params::ParamSet;
use crate::tensor::Graph;

pub use experiment::{
    cross_validate, fold_seeds, ConfigError, DataSection, ExperimentConfig, ExperimentResult, FoldResult, FoldSeeds,
    Prediction, RunOptions,
};
pub use outputs::{
    history_csv, metrics_csv, metrics_rows, predictions_csv, read_metrics_csv, read_predictions_csv, write_run,
    MetricsRow, RunManifest, RUN_MANIFEST_FILE,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("training diverged: non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("no training batches")]
    EmptyTraining,
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("{path}: {msg}")]
    Output { path: String, msg: String },
}

fn d_lr() -> f64 {
    1e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "d_lr")]
        lr: f64,
        #[serde(default = "d_beta1")]
        beta1: f64,
        #[serde(default = "d_beta2")]
        beta2: f64,
        #[serde(default = "d_eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default = "d_lr")]
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => lr,
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |f: &str, m: &str| Err(ConfigError::new(format!("train.optimizer.{f}"), m));
        if !(self.lr() >= 0.0 && self.lr().is_finite()) {
            return bad("lr", "must be a finite non-negative number");
        }
        match *self {
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                if !(0.0..1.0).contains(&beta1) {
                    return bad("beta1", "must lie in [0, 1)");
                }
                if !(0.0..1.0).contains(&beta2) {
                    return bad("beta2", "must lie in [0, 1)");
                }
                if !(eps > 0.0) {
                    return bad("eps", "must be positive");
                }
            }
            OptimizerConfig::Sgd { momentum, .. } => {
                if !(0.0..1.0).contains(&momentum) {
                    return bad("momentum", "must lie in [0, 1)");
                }
            }
        }
        Ok(())
    }
}

/// First-order optimizer state for one parameter set.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let v = match config {
            OptimizerConfig::Adam { .. } => zeros.clone(),
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        Optimizer {
            config,
            steps: 0,
            m: zeros,
            v,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the gradients stored on `params`.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.steps += 1;
        let t = self.steps as i32;
        match self.config {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((tensor, m), v) in params.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    let (data, grad) = tensor.data_and_grad_mut();
                    let Some(grad) = grad else { continue };
                    for i in 0..data.len() {
                        let g = grad[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        data[i] -= update;
                    }
                }
            }
            OptimizerConfig::Sgd { lr, momentum } => {
                for (tensor, m) in params.tensors_mut().iter_mut().zip(&mut self.m) {
                    let (data, grad) = tensor.data_and_grad_mut();
                    let Some(grad) = grad else { continue };
                    for i in 0..data.len() {
                        m[i] = momentum * m[i] + grad[i];
                        data[i] -= lr * m[i];
                    }
                }
            }
        }
    }
}

fn d_batch() -> usize {
    32
}
fn d_epochs() -> usize {
    30
}
fn d_patience() -> usize {
    5
}
fn d_val() -> f64 {
    0.1
}
fn d_threshold() -> f64 {
    0.5
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation Mcc improvement and
    /// restore the best epoch's parameters. When disabled every epoch runs
    /// and the final parameters are kept.
    #[serde(default = "d_true")]
    pub early_stopping: bool,
    #[serde(default = "d_patience")]
    pub patience: usize,
    /// Share of each training partition held out for validation.
    #[serde(default = "d_val")]
    pub validation_fraction: f64,
    /// Weight examples by inverse class frequency.
    #[serde(default)]
    pub class_weighting: bool,
    #[serde(default = "d_threshold")]
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            batch_size: d_batch(),
            max_epochs: d_epochs(),
            early_stopping: true,
            patience: d_patience(),
            validation_fraction: d_val(),
            class_weighting: false,
            threshold: d_threshold(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |f: &str, m: &str| Err(ConfigError::new(format!("train.{f}"), m));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be positive");
        }
        if self.early_stopping && (self.patience == 0 || self.patience >= self.max_epochs) {
            return bad("patience", "must be positive and less than train.max_epochs");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction", "must lie in [0, 1)");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold", "must lie in (0, 1)");
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean (weighted) per-example training loss over the epoch.
    pub train_loss: f64,
    pub val_confusion: Option<ConfusionMatrix>,
    pub val_metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    /// Epoch whose parameters the model holds on return.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Inverse-frequency weights `(negative, positive)` over `idx`.
pub fn class_weights(data: &[EncodedRecord], idx: &[usize]) -> [f64; 2] {
    let pos = idx.iter().filter(|&&i| data[i].label == 1).count();
    let neg = idx.len() - pos;
    let n = idx.len() as f64;
    let w = |c: usize| if c == 0 { 1.0 } else { n / (2.0 * c as f64) };
    [w(neg), w(pos)]
}

/// Predicted probabilities and the confusion matrix over `idx`.
pub fn evaluate(
    model: &Model,
    data: &[EncodedRecord],
    idx: &[usize],
    threshold: f64,
) -> Result<(ConfusionMatrix, Vec<f64>), TrainError> {
    let probs = model.predict_proba(idx.iter().map(|&i| data[i].tokens.as_slice()))?;
    let mut cm = ConfusionMatrix::new();
    for (&i, &p) in idx.iter().zip(&probs) {
        cm.accumulate(predict(p, threshold), data[i].label)?;
    }
    Ok((cm, probs))
}

/// Runs one epoch of minibatch updates; returns the mean example loss.
fn run_epoch(
    model: &mut Model,
    opt: &mut Optimizer,
    data: &[EncodedRecord],
    train_idx: &[usize],
    cfg: &TrainConfig,
    weights: [f64; 2],
    seed: u64,
    epoch: usize,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (b, batch) in batch_indices(train_idx, cfg.batch_size, Some((seed, epoch as u64)))
        .into_iter()
        .enumerate()
    {
        let mut g = Graph::new();
        let bound = model.params().bind(&mut g);
        let mark = g.len();
        let scale = 1.0 / batch.len() as f64;
        for &i in &batch {
            let rec = &data[i];
            let l = model.example_loss(&mut g, &bound, &rec.tokens, rec.label)?;
            let value = g.item(l);
            if !value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b,
                    loss: value,
                });
            }
            let w = weights[usize::from(rec.label)];
            total += w * value;
            let scaled = g.affine(l, w * scale, 0.0);
            g.backward(scaled).map_err(ModelError::from)?;
            g.truncate(mark);
        }
        let params = model.params_mut();
        params.accumulate_grads(&g, &bound).map_err(ModelError::from)?;
        opt.step(params);
        params.zero_grad();
    }
    Ok(total / train_idx.len() as f64)
}

/// Trains with the default stopping rules.
pub fn train(
    model: &mut Model,
    data: &[EncodedRecord],
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    train_with(model, data, train_idx, val_idx, cfg, seed, |_, _| ControlFlow::Continue(()))
}

/// Trains `model` in place. Batches are reshuffled every epoch from
/// `(seed, epoch)`. After each epoch `on_epoch` sees the stats and the
/// current model and may end training early.
///
/// With early stopping enabled and a nonempty validation set the best
/// validation-Mcc epoch (earliest on ties) is restored before returning.
pub fn train_with(
    model: &mut Model,
    data: &[EncodedRecord],
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats, &Model) -> ControlFlow<()>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(TrainError::EmptyTraining);
    }
    let weights = if cfg.class_weighting {
        class_weights(data, train_idx)
    } else {
        [1.0, 1.0]
    };
    let select_best = cfg.early_stopping && !val_idx.is_empty();
    let mut opt = Optimizer::new(cfg.optimizer, model.params());
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let train_loss = run_epoch(model, &mut opt, data, train_idx, cfg, weights, seed, epoch)?;
        let (val_confusion, val_metrics) = if val_idx.is_empty() {
            (None, None)
        } else {
            let (cm, _) = evaluate(model, data, val_idx, cfg.threshold)?;
            (Some(cm), Some(cm.compute()?))
        };
        let stats = EpochStats {
            epoch,
            train_loss,
            val_confusion,
            val_metrics,
        };
        log::debug!(
            "epoch {epoch}: loss {train_loss:.5} val mcc {}",
            val_metrics.map_or("-".to_string(), |m| format!("{:.4}", m.mcc))
        );
        let flow = on_epoch(&stats, model);
        history.push(stats);
        if select_best {
            let mcc = val_metrics.expect("validation ran").mcc;
            if best.as_ref().map_or(true, |(b, _, _)| mcc > *b) {
                best = Some((mcc, epoch, model.params().clone()));
            } else if epoch - best.as_ref().expect("set").1 >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
        if flow.is_break() {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            *model.params_mut() = params;
            epoch
        }
        None => history.len() - 1,
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        stopped_early,
    })
}
