use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowModel, TrainMeta};
use crate::noise::{purpose, RngStream};
use crate::scalar::Scalar;
use crate::sde::SnapshotDataset;
use crate::train::adam::{adam_step, OptimizerState};
use crate::train::loss::{grad_nll, nll_loss, Batch};

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// `None` trains on the full training split every iteration.
    pub batch_size: Option<usize>,
    pub val_fraction: f64,
    /// Stop after this many iterations without a new best validation NLL.
    pub patience: usize,
    pub seed: u64,
    /// Bound on the global gradient norm of the per-sample mean loss.
    pub grad_clip: f64,
    /// Validation NLL is evaluated every this many iterations.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            max_iters: 20_000,
            batch_size: None,
            val_fraction: 0.1,
            patience: 2000,
            seed: 0,
            grad_clip: 100.0,
            val_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(Error::invalid(format!("val_fraction must lie in [0, 0.5), got {}", self.val_fraction)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::invalid(format!("grad_clip must be > 0, got {}", self.grad_clip)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.val_every == 0 {
            return Err(Error::invalid("val_every must be at least 1"));
        }
        Ok(())
    }
}

/// Per-iteration training NLL and periodic validation NLL (both per sample).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub train: Vec<f64>,
    /// `(iteration, validation NLL)`; iteration `k` means the parameters
    /// after `k` updates.
    pub val: Vec<(usize, f64)>,
}

impl LossHistory {
    /// CSV with columns `iter,train_nll,val_nll`; missing values are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,train_nll,val_nll\n");
        let mut vals = self.val.iter().peekable();
        let last = self.train.len().max(self.val.last().map_or(0, |v| v.0 + 1));
        for it in 0..last {
            let tr = self.train.get(it).map(|v| v.to_string()).unwrap_or_default();
            let va = match vals.peek() {
                Some(&&(k, v)) if k == it => {
                    vals.next();
                    v.to_string()
                }
                _ => String::new(),
            };
            writeln!(out, "{it},{tr},{va}").unwrap();
        }
        out
    }

    /// Trailing moving average of the validation curve at `iter`.
    pub fn smoothed_val(&self, iter: usize, window: usize) -> Option<f64> {
        let pts: Vec<f64> = self
            .val
            .iter()
            .filter(|(k, _)| *k <= iter && *k + window > iter)
            .map(|(_, v)| *v)
            .collect();
        (!pts.is_empty()).then(|| pts.iter().sum::<f64>() / pts.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    Patience,
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub model: FlowModel<T>,
    pub history: LossHistory,
    pub best_iteration: usize,
    pub best_val_nll: Option<f64>,
    pub final_val_nll: Option<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    pub lr_halvings: usize,
}

impl<T: Scalar> TrainReport<T> {
    pub fn meta(&self, seed: u64, dataset: Option<String>) -> TrainMeta {
        TrainMeta {
            time_span: self.model.time_span,
            iterations: self.iterations,
            best_iteration: self.best_iteration,
            best_val_nll: self.best_val_nll,
            seed,
            dataset,
        }
    }
}

/// Train/validation split, stratified by snapshot.
pub fn split_dataset<T: Scalar>(dataset: &SnapshotDataset, val_fraction: f64, seed: u64) -> Result<(Batch<T>, Option<Batch<T>>)> {
    let dim = dataset.dim;
    let n = dataset.n();
    let n_val = if val_fraction > 0.0 {
        ((val_fraction * n as f64).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    if n < 2 && n_val > 0 {
        return Err(Error::InsufficientData("need at least 2 samples per snapshot to hold out validation data".into()));
    }
    let (mut tp, mut tt, mut vp, mut vt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (j, &t) in dataset.times.iter().enumerate() {
        let mut rng = RngStream::derived(seed, purpose::SPLIT, &[j as u64]);
        let mut idx: Vec<usize> = (0..n).collect();
        for k in 0..n_val {
            let r = k + rng.below(n - k);
            idx.swap(k, r);
        }
        for (pos, &i) in idx.iter().enumerate() {
            let (p, ts) = if pos < n_val { (&mut vp, &mut vt) } else { (&mut tp, &mut tt) };
            p.extend(dataset.point(j, i).iter().map(|&v| T::of(v)));
            ts.push(T::of(t));
        }
    }
    let train = Batch::new(dim, tp, tt)?;
    let val = if n_val > 0 { Some(Batch::new(dim, vp, vt)?) } else { None };
    Ok((train, val))
}

const DIVERGENCE_MARGIN: f64 = 10.0;
const DIVERGENCE_SPAN: usize = 500;

/// Validation bookkeeping: best iterate and the divergence rule.
struct Tracker<T> {
    best: Option<(f64, usize, FlowModel<T>)>,
    initial: Option<f64>,
    bad_since: Option<usize>,
}

impl<T: Scalar> Tracker<T> {
    fn check(&mut self, it: usize, model: &FlowModel<T>, val: Option<&Batch<T>>, history: &mut LossHistory) -> Result<Option<f64>> {
        let Some(val) = val else { return Ok(None) };
        let v = match nll_loss(model, val) {
            Ok(v) => v.mean.as_f64(),
            Err(Error::Numerical(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        history.val.push((it, v));
        let init = *self.initial.get_or_insert(v);
        if v > init + DIVERGENCE_MARGIN {
            let since = *self.bad_since.get_or_insert(it);
            if it - since >= DIVERGENCE_SPAN {
                return Err(Error::Divergence(format!(
                    "validation NLL {v:.4} exceeded initial {init:.4} + {DIVERGENCE_MARGIN} for {} iterations",
                    it - since
                )));
            }
        } else {
            self.bad_since = None;
        }
        if v.is_finite() && self.best.as_ref().is_none_or(|b| v < b.0) {
            self.best = Some((v, it, model.clone()));
        }
        Ok(Some(v))
    }
}

/// Maximum-likelihood fit of `model` to `dataset` with Adam.
///
/// The returned model holds the parameters with the lowest validation NLL
/// seen (the final iterate is always evaluated). Without a validation split
/// the final iterate is returned.
pub fn train<T: Scalar>(model: FlowModel<T>, dataset: &SnapshotDataset, config: &TrainConfig) -> Result<TrainReport<T>> {
    config.validate()?;
    if dataset.dim != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: dataset.dim,
        });
    }
    let (train_set, val_set) = split_dataset::<T>(dataset, config.val_fraction, config.seed)?;
    let mut model = model;
    model.time_span = Some([dataset.times[0], *dataset.times.last().unwrap()]);
    let mut state = OptimizerState::for_model(&model);
    let mut lr = T::of(config.learning_rate);
    let clip = T::of(config.grad_clip);
    let mut batch_rng = RngStream::derived(config.seed, purpose::BATCH, &[]);
    let n_train = train_set.len();
    let mut rows: Vec<usize> = (0..n_train).collect();

    let mut history = LossHistory::default();
    let mut tracker = Tracker::<T> {
        best: None,
        initial: None,
        bad_since: None,
    };
    let mut lr_halvings = 0;
    let mut stop = StopReason::MaxIters;

    let mut it = 0;
    while it < config.max_iters {
        if it % config.val_every == 0 {
            tracker.check(it, &model, val_set.as_ref(), &mut history)?;
            if let Some((_, b, _)) = &tracker.best {
                if it - b >= config.patience {
                    stop = StopReason::Patience;
                    break;
                }
            }
        }
        let step_batch;
        let batch = match config.batch_size {
            Some(bs) if bs < n_train => {
                for k in 0..bs {
                    let r = k + batch_rng.below(n_train - k);
                    rows.swap(k, r);
                }
                step_batch = train_set.select(&rows[..bs])?;
                &step_batch
            }
            _ => &train_set,
        };
        match grad_nll(&model, batch) {
            Ok((nll, mut grad)) => {
                history.train.push(nll.mean.as_f64());
                grad.scale(T::one() / T::of(batch.len() as f64));
                let norm = grad.norm();
                if norm > clip {
                    grad.scale(clip / norm);
                }
                adam_step(&mut model, &grad.blocks, &mut state, lr)?;
            }
            Err(Error::Numerical(msg)) => {
                history.train.push(f64::NAN);
                lr = lr * T::of(0.5);
                lr_halvings += 1;
                log::warn!("iteration {it}: {msg}; learning rate halved to {}", lr.as_f64());
                if lr.as_f64() < config.learning_rate * 1e-6 {
                    return Err(Error::Divergence(format!("learning rate collapsed after: {msg}")));
                }
            }
            Err(e) => return Err(e),
        }
        it += 1;
        if it % 500 == 0 {
            log::info!(
                "iteration {it}: train NLL {:.5}, best val {:?}",
                history.train.last().unwrap(),
                tracker.best.as_ref().map(|b| b.0)
            );
        }
    }
    let final_val = tracker.check(it, &model, val_set.as_ref(), &mut history)?;
    let (best_val_nll, best_iteration, model) = match tracker.best {
        Some((v, k, m)) => (Some(v), k, m),
        None => (None, it, model),
    };
    Ok(TrainReport {
        model,
        history,
        best_iteration,
        best_val_nll,
        final_val_nll: final_val,
        iterations: it,
        stop,
        lr_halvings,
    })
}
