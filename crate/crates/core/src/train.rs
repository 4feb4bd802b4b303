//! Minibatch training and evaluation over featurized examples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::TrainError;
use crate::model::CommonsenseCache;
use crate::module::Module;
use crate::optim::{adamw_step, clip_grad_norm, AdamWConfig, AdamWState};
use crate::scalar::Scalar;
use crate::task::{Featurized, TaskModel};
use crate::transformer::layers::Dropout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub grad_clip: f64,
    pub dropout: f64,
    /// Recompute the mean training loss with a full pass after every epoch.
    pub track_train_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-6,
            batch_size: 8,
            epochs: 10,
            weight_decay: 0.01,
            seed: 0,
            grad_clip: 1.0,
            dropout: 0.0,
            track_train_loss: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if (self.lr.is_nan() || self.lr <= 0.0)
            || self.batch_size == 0
            || (self.grad_clip.is_nan() || self.grad_clip <= 0.0)
            || self.weight_decay < 0.0
        {
            return Err(TrainError::Config(format!("{self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-example loss over the training set after the epoch, dropout
    /// off; absent when tracking is disabled.
    pub train_loss: Option<f64>,
    /// Mean of the minibatch losses seen during the epoch.
    pub running_loss: f64,
    pub eval_accuracy: Option<f64>,
}

pub fn metrics_tsv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch\ttrain_loss\trunning_loss\teval_accuracy\n");
    for m in metrics {
        let acc = m
            .eval_accuracy
            .map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"));
        let loss = m
            .train_loss
            .map_or_else(|| "NA".to_string(), |l| format!("{l:.8}"));
        s.push_str(&format!(
            "{}\t{loss}\t{:.8}\t{acc}\n",
            m.epoch, m.running_loss
        ));
    }
    s
}

/// Mean loss over `data` with dropout off.
pub fn mean_loss<T: Scalar>(model: &TaskModel<T>, data: &[Featurized]) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Config("empty dataset".into()));
    }
    let mut total = 0.0;
    for ex in data {
        total += model.example_loss(ex)?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub predictions: Vec<usize>,
}

impl EvalReport {
    pub fn from_predictions(predictions: Vec<usize>, data: &[Featurized]) -> Self {
        let correct = predictions
            .iter()
            .zip(data)
            .filter(|(p, ex)| **p == ex.label)
            .count();
        let total = data.len();
        Self {
            accuracy: if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            },
            correct,
            total,
            predictions,
        }
    }
}

pub fn evaluate<T: Scalar>(
    model: &TaskModel<T>,
    data: &[Featurized],
) -> Result<EvalReport, TrainError> {
    let predictions = data
        .iter()
        .map(|ex| model.predict(ex))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::from_predictions(predictions, data))
}

/// One optimizer step on `batch`: mean loss, backward, clip, AdamW. Returns
/// the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut TaskModel<T>,
    batch: &[&Featurized],
    state: &mut AdamWState<T>,
    cfg: &TrainConfig,
    drop: &mut Dropout,
) -> Result<f64, TrainError> {
    let (loss, grads) = {
        let mut tape = Tape::new();
        let mut cache = CommonsenseCache::new();
        let mut losses = Vec::with_capacity(batch.len());
        for ex in batch {
            losses.push(model.loss(&mut tape, ex, drop, &mut cache)?);
        }
        let all = tape.concat_cols(&losses)?;
        let loss = tape.mean(all);
        let value = tape.scalar(loss).as_f64();
        (value, tape.backward(loss)?)
    };
    model.zero_grads();
    model.accumulate_grads(&grads);
    crate::optim::check_finite_grads(model)?;
    clip_grad_norm(model, cfg.grad_clip);
    adamw_step(model, state, &cfg.optimizer())?;
    Ok(loss)
}

/// Epochs of shuffled minibatch AdamW. The order of batches and dropout
/// masks derive from `cfg.seed`, so a run is reproducible bitwise.
pub fn train<T: Scalar>(
    model: &mut TaskModel<T>,
    data: &[Featurized],
    cfg: &TrainConfig,
    eval: Option<&[Featurized]>,
) -> Result<Vec<EpochMetrics>, TrainError> {
    train_with(model, data, cfg, eval, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Scalar>(
    model: &mut TaskModel<T>,
    data: &[Featurized],
    cfg: &TrainConfig,
    eval: Option<&[Featurized]>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut state = AdamWState::new(model);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop = Dropout::seeded(cfg.dropout, cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut running = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Featurized> = chunk.iter().map(|&i| &data[i]).collect();
            running += train_step(model, &batch, &mut state, cfg, &mut drop)?;
            batches += 1;
        }
        let m = EpochMetrics {
            epoch,
            train_loss: if cfg.track_train_loss {
                Some(mean_loss(model, data)?)
            } else {
                None
            },
            running_loss: running / batches as f64,
            eval_accuracy: eval
                .map(|e| evaluate(model, e))
                .transpose()?
                .map(|r| r.accuracy),
        };
        on_epoch(&m);
        metrics.push(m);
    }
    model.zero_grads();
    Ok(metrics)
}

/// Hyper-parameter grid: every (lr, batch size) pair is trained from the same
/// initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

impl Grid {
    /// The learning-rate and batch-size grid used for the benchmark tasks.
    pub fn benchmark() -> Self {
        Self {
            lrs: vec![1e-5, 2e-5, 5e-5],
            batch_sizes: vec![8, 16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub lr: f64,
    pub batch_size: usize,
    pub dev_accuracy: f64,
    pub final_train_loss: f64,
}

/// Trains a copy of `init` per grid point and reports dev accuracy; results
/// come back in grid order, the best first when sorted by the caller.
pub fn grid_search<T: Scalar>(
    init: &TaskModel<T>,
    train_data: &[Featurized],
    dev: &[Featurized],
    base: &TrainConfig,
    grid: &Grid,
) -> Result<Vec<GridResult>, TrainError> {
    let mut out = Vec::new();
    for &lr in &grid.lrs {
        for &batch_size in &grid.batch_sizes {
            let cfg = TrainConfig {
                lr,
                batch_size,
                ..base.clone()
            };
            let mut model = init.clone();
            let metrics = train(&mut model, train_data, &cfg, None)?;
            out.push(GridResult {
                lr,
                batch_size,
                dev_accuracy: evaluate(&model, dev)?.accuracy,
                final_train_loss: metrics
                    .last()
                    .and_then(|m| m.train_loss)
                    .unwrap_or(f64::NAN),
            });
        }
    }
    Ok(out)
}
