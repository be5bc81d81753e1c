//! Mini-batch training with AdamW, linear learning-rate decay and early
//! stopping on validation loss, plus evaluation.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::LogGraph;
use crate::metrics::Metrics;
use crate::model::{batch_loss, GraphInput, Model};
use crate::scalar::Scalar;
use crate::tensor::{DropoutRng, ParamStore, Tape};
use crate::window::{chronological_split, oversample, OversampleReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub early_stop_patience: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub oversample_target: f64,
    pub val_fraction: f64,
    /// Graphs per backward pass. Gradients of a batch are summed over
    /// chunks in a fixed order, so results do not depend on `threads`.
    pub chunk_size: usize,
    /// Worker threads for chunk-parallel gradients; 1 runs serially.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_start: 3e-4,
            lr_end: 1e-9,
            batch_size: 64,
            max_epochs: 100,
            early_stop_patience: 20,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            oversample_target: 0.3,
            val_fraction: 0.1,
            chunk_size: 32,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return bad(format!(
                "need 0 < lr_end <= lr_start, got {} and {}",
                self.lr_end, self.lr_start
            ));
        }
        if self.batch_size == 0 || self.chunk_size == 0 || self.threads == 0 {
            return bad("batch_size, chunk_size and threads must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("AdamW needs betas in [0, 1) and eps > 0".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if !(self.oversample_target > 0.0 && self.oversample_target < 1.0) {
            return bad(format!(
                "oversample_target must lie in (0, 1), got {}",
                self.oversample_target
            ));
        }
        Ok(())
    }
}

/// Linear interpolation from `lr_start` at step 0 to `lr_end` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return cfg.lr_start;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    cfg.lr_start * (1.0 - frac) + cfg.lr_end * frac
}

/// One AdamW update of a parameter tensor. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
) {
    assert!(param.len() == grad.len() && grad.len() == m.len() && m.len() == v.len());
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let one = T::one();
    let c1 = T::lit(1.0 - cfg.beta1.powf(t as f64));
    let c2 = T::lit(1.0 - cfg.beta2.powf(t as f64));
    let lr_t = T::lit(lr);
    let decay = T::lit(1.0 - lr * cfg.weight_decay);
    let eps = T::lit(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] = param[i] * decay - lr_t * mh / (vh.sqrt() + eps);
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .ids()
            .map(|id| vec![T::zero(); params.values(id).len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.0;
            adamw_step(
                params.values_mut(id),
                &grads[i],
                &mut self.m[i],
                &mut self.v[i],
                self.t,
                lr,
                cfg,
            );
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        out.push_str(&format!("{},{:?},{:?},{:?}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
    }
    out
}

/// Tracks the best validation loss and when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch's loss. Returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport<T> {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub steps: u64,
}

/// Chronological train/validation split followed by oversampling of the
/// training part only.
pub fn split_and_oversample(
    graphs: &[LogGraph],
    cfg: &TrainConfig,
) -> Result<(Vec<LogGraph>, Vec<LogGraph>, OversampleReport)> {
    if graphs.is_empty() {
        return Err(Error::EmptyInput("training set has no graphs".into()));
    }
    let (train, val) = if cfg.val_fraction > 0.0 {
        chronological_split(graphs, 1.0 - cfg.val_fraction)?
    } else {
        (graphs.to_vec(), Vec::new())
    };
    let (train, report) = oversample(&train, |g| g.label.is_anomalous(), cfg.oversample_target, cfg.seed)?;
    Ok((train, val, report))
}

fn zero_grads<T: Scalar>(params: &ParamStore<T>) -> Vec<Vec<T>> {
    params
        .ids()
        .map(|id| vec![T::zero(); params.values(id).len()])
        .collect()
}

/// Loss and gradients of one chunk, with the loss scaled by `weight`.
fn chunk_gradients<T: Scalar>(
    model: &Model<T>,
    graphs: &[&GraphInput<T>],
    weight: f64,
    dropout_seed: u64,
) -> (f64, Vec<Vec<T>>) {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let mut rng = DropoutRng::new(dropout_seed);
    let loss = batch_loss(model, &mut tape, &bound, graphs, Some(&mut rng));
    let loss = tape.scale(loss, T::lit(weight));
    let value = tape.value(loss)[0].as_f64();
    let mut grads = tape.backward(loss);
    let out = model
        .params()
        .ids()
        .map(|id| {
            grads
                .take(bound[id.0])
                .unwrap_or_else(|| vec![T::zero(); model.params().values(id).len()])
        })
        .collect();
    (value, out)
}

/// Mean cross-entropy without dropout.
pub fn mean_loss<T: Scalar>(model: &Model<T>, graphs: &[GraphInput<T>], chunk: usize) -> f64 {
    if graphs.is_empty() {
        return f64::NAN;
    }
    let mut total = 0.0;
    for part in graphs.chunks(chunk.max(1)) {
        let refs: Vec<_> = part.iter().collect();
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let loss = batch_loss(model, &mut tape, &bound, &refs, None);
        total += tape.value(loss)[0].as_f64() * part.len() as f64;
    }
    total / graphs.len() as f64
}

pub fn train<T: Scalar>(
    model: Model<T>,
    train_set: &[GraphInput<T>],
    val_set: &[GraphInput<T>],
    cfg: &TrainConfig,
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set has no graphs".into()));
    }
    let positives = train_set.iter().filter(|g| g.label == 1).count();
    if positives == 0 || positives == train_set.len() {
        warn!(
            "training set contains a single class ({positives} of {} anomalous)",
            train_set.len()
        );
    }
    if val_set.is_empty() {
        warn!("validation set is empty; early stopping uses the training loss");
    }
    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut model = model;
    let mut opt = AdamW::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.max_epochs;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best_params = model.params().clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let epoch_lr = lr_at(step, total_steps, cfg);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let graphs: Vec<&GraphInput<T>> = batch.iter().map(|&i| &train_set[i]).collect();
            let chunks: Vec<(&[&GraphInput<T>], u64)> = graphs.chunks(cfg.chunk_size).map(|c| (c, rng.gen())).collect();
            let weight_of = |c: &[&GraphInput<T>]| c.len() as f64 / graphs.len() as f64;
            let results: Vec<(f64, Vec<Vec<T>>)> = match &pool {
                Some(pool) => pool.install(|| {
                    chunks
                        .par_iter()
                        .map(|&(c, seed)| chunk_gradients(&model, c, weight_of(c), seed))
                        .collect()
                }),
                None => chunks
                    .iter()
                    .map(|&(c, seed)| chunk_gradients(&model, c, weight_of(c), seed))
                    .collect(),
            };
            let mut grads = zero_grads(model.params());
            let mut batch_loss = 0.0;
            for (loss, g) in results {
                batch_loss += loss;
                for (acc, part) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                }
            }
            for id in model.params().ids() {
                if grads[id.0].iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        param: model.params().name(id).to_string(),
                        step,
                    });
                }
            }
            let lr = lr_at(step, total_steps, cfg);
            opt.step(model.params_mut(), &grads, lr, cfg);
            loss_sum += batch_loss * graphs.len() as f64;
            step += 1;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            mean_loss(&model, val_set, cfg.batch_size)
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: epoch_lr,
        });
        info!("epoch {epoch}: train loss {train_loss:.6}, val loss {val_loss:.6}, lr {epoch_lr:.3e}");
        let (improved, stop) = stopper.update(epoch, val_loss);
        if improved {
            best_params = model.params().clone();
        }
        if stop {
            info!(
                "no validation improvement for {} epochs; stopping",
                cfg.early_stop_patience
            );
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, best_val_loss) = stopper.best();
    *model.params_mut() = best_params;
    Ok(TrainReport {
        model,
        history,
        best_epoch,
        best_val_loss,
        stopped_early,
        steps: opt.steps(),
    })
}

/// Anomaly probabilities, batched without dropout.
pub fn anomaly_scores<T: Scalar>(model: &Model<T>, graphs: &[GraphInput<T>], chunk: usize) -> Vec<[f64; 2]> {
    graphs
        .chunks(chunk.max(1))
        .flat_map(|part| {
            let refs: Vec<_> = part.iter().collect();
            model.predict_proba(&refs)
        })
        .map(|p| [p[0].as_f64(), p[1].as_f64()])
        .collect()
}

/// Argmax prediction; ties go to the normal class.
pub fn is_predicted_anomalous(p: [f64; 2]) -> bool {
    p[1] > p[0]
}

pub fn evaluate<T: Scalar>(model: &Model<T>, graphs: &[GraphInput<T>]) -> Result<Metrics> {
    if graphs.is_empty() {
        return Err(Error::EmptyInput("test set has no graphs".into()));
    }
    let scores = anomaly_scores(model, graphs, 64);
    Ok(Metrics::from_predictions(
        scores
            .iter()
            .zip(graphs)
            .map(|(&p, g)| (is_predicted_anomalous(p), g.label == 1)),
    ))
}
