//! Mini-batch SGD with global norm clipping and plateau-triggered
//! learning-rate decay.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{make_batches, Batch, EncodedFragment};
use crate::error::{Error, Result};
use crate::eval::dataset_loss;
use crate::model::checkpoint::{expect_magic, get_f64, get_u32, get_u64, get_usize, put_f64, put_u32, put_u64};
use crate::model::{loss_and_gradients, ModelParameters};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    /// Consecutive non-improving validations before one decay.
    pub patience_steps: usize,
    pub seed: u64,
    /// Steps between validation evaluations.
    pub checkpoint_interval: usize,
    /// Optional hard cap on SGD steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            initial_lr: 0.5,
            decay_factor: 0.99,
            clip_norm: 5.0,
            max_epochs: 10,
            patience_steps: 3,
            seed: 0,
            checkpoint_interval: 1000,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Domain(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        // A zero rate is accepted: it freezes the parameters, which is useful
        // as a control run.
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr must be finite and non-negative, got {}", self.initial_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!("decay_factor must lie in (0, 1), got {}", self.decay_factor));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.max_epochs == 0 || self.patience_steps == 0 || self.checkpoint_interval == 0 {
            return bad("max_epochs, patience_steps and checkpoint_interval must be positive".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive when given".into());
        }
        Ok(())
    }
}

/// Mutable schedule state; enough to resume a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub lr: f64,
    pub step: usize,
    pub epoch: usize,
    /// Batches of the current epoch already consumed.
    pub batch_in_epoch: usize,
    pub best_validation: f64,
    /// The last `patience_steps` validation losses, oldest first.
    pub recent_validation: Vec<f64>,
    /// Consecutive evaluations without improvement since the last decay.
    pub stale_evaluations: usize,
    pub decay_events: u32,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        TrainState {
            lr: config.initial_lr,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            best_validation: f64::INFINITY,
            recent_validation: Vec::new(),
            stale_evaluations: 0,
            decay_events: 0,
        }
    }
}

/// Records a validation loss and decays the rate after `patience_steps`
/// consecutive evaluations that fail to beat the best so far. Returns whether
/// a decay happened.
pub fn maybe_decay(state: &mut TrainState, config: &TrainConfig, validation_loss: f64) -> bool {
    state.recent_validation.push(validation_loss);
    if state.recent_validation.len() > config.patience_steps {
        state.recent_validation.remove(0);
    }
    if validation_loss < state.best_validation {
        state.best_validation = validation_loss;
        state.stale_evaluations = 0;
        return false;
    }
    state.stale_evaluations += 1;
    if state.stale_evaluations < config.patience_steps {
        return false;
    }
    state.decay_events += 1;
    state.stale_evaluations = 0;
    state.lr = config.initial_lr * config.decay_factor.powi(state.decay_events as i32);
    true
}

/// Global L2 norm over every element of every tensor.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

/// Rescales all gradients by `clip_norm / g` when their global norm `g`
/// exceeds `clip_norm`. Returns `g` as measured before clipping.
pub fn clip_gradients(grads: &mut [Tensor], clip_norm: f64) -> Result<f64> {
    if !(clip_norm > 0.0) {
        return Err(Error::Domain(format!("clip_norm must be positive, got {clip_norm}")));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        let bad = grads.iter().position(|g| !g.is_finite()).unwrap_or(0);
        return Err(Error::Diverged {
            step: 0,
            reason: format!("gradient norm is {norm} (first non-finite tensor #{bad})"),
        });
    }
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    Ok(norm)
}

/// `θ ← θ − lr·∇θ` for every tensor.
pub fn sgd_step(params: &mut ModelParameters, grads: &[Tensor], lr: f64) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameter tensors",
            grads.len(),
            tensors.len()
        )));
    }
    for (p, g) in tensors.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    for (p, g) in tensors.iter_mut().zip(grads) {
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    Ok(())
}

/// Mean per-token loss over the batch and its gradient. Per-example
/// gradients are summed in batch order, so the result is deterministic.
pub fn batch_gradients(params: &ModelParameters, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    let mut sum: Option<Vec<Tensor>> = None;
    for (i, ex) in batch.examples.iter().enumerate() {
        let (loss, grads) = loss_and_gradients(params, &ex.source, &batch.target_inputs[i], &batch.target_labels[i])?;
        total += loss.total;
        tokens += loss.tokens;
        match sum.as_mut() {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g)?;
                }
            }
        }
    }
    let mut grads = sum.ok_or_else(|| Error::Domain("empty batch".into()))?;
    if tokens == 0 {
        return Err(Error::Domain("batch has no target tokens".into()));
    }
    let inv = 1.0 / tokens as f64;
    for g in &mut grads {
        for x in g.data_mut() {
            *x *= inv;
        }
    }
    Ok((total / tokens as f64, grads))
}

/// One SGD update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Batch loss before the update.
    pub loss: f64,
    pub grad_norm: f64,
    /// Global norm actually applied, after clipping.
    pub clipped_norm: f64,
}

/// One loss-log line, written at every validation.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Token-weighted training loss since the previous record.
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub validation_perplexity: Option<f64>,
}

impl fmt::Display for LogRecord {
    /// `step  epoch  lr  train  val  val_ppl`, tab-separated; floats use the
    /// shortest representation that round-trips exactly.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |x| x.to_string());
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.epoch,
            self.lr,
            self.train_loss,
            opt(self.validation_loss),
            opt(self.validation_perplexity)
        )
    }
}

impl LogRecord {
    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Format(format!("loss log line has {} fields, expected 6", fields.len())));
        }
        let bad = |what: &str| Error::Format(format!("bad {what} in loss log line {line:?}"));
        let opt = |s: &str, what: &str| -> Result<Option<f64>> {
            if s == "NA" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(what))
            }
        };
        Ok(LogRecord {
            step: fields[0].parse().map_err(|_| bad("step"))?,
            epoch: fields[1].parse().map_err(|_| bad("epoch"))?,
            lr: fields[2].parse().map_err(|_| bad("lr"))?,
            train_loss: fields[3].parse().map_err(|_| bad("train loss"))?,
            validation_loss: opt(fields[4], "validation loss")?,
            validation_perplexity: opt(fields[5], "validation perplexity")?,
        })
    }
}

pub struct TrainOutcome {
    /// Parameters after the last step.
    pub params: ModelParameters,
    /// Parameters at the best validation loss; the final ones when there is
    /// no validation set.
    pub best_params: ModelParameters,
    pub state: TrainState,
    pub steps: Vec<StepRecord>,
    pub log: Vec<LogRecord>,
}

/// Hooks called during [`train_with`].
pub trait TrainObserver {
    /// After each validation, with the parameters just evaluated.
    fn on_evaluation(&mut self, _record: &LogRecord, _params: &ModelParameters, _state: &TrainState) -> Result<()> {
        Ok(())
    }

    /// When a new best validation loss is reached.
    fn on_best(&mut self, _params: &ModelParameters, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

struct Silent;

impl TrainObserver for Silent {}

pub fn train(
    config: &TrainConfig,
    params: ModelParameters,
    train_set: &[EncodedFragment],
    validation_set: &[EncodedFragment],
) -> Result<TrainOutcome> {
    train_with(config, params, TrainState::new(config), train_set, validation_set, &mut Silent)
}

/// Runs SGD from `state` until `max_epochs` or `max_steps`.
///
/// Each epoch `e` shuffles with `seed + e`. Every `checkpoint_interval`
/// steps, and once at the end, the validation loss is measured, the decay
/// rule applied and a [`LogRecord`] emitted. With an empty validation set the
/// decay rule is skipped.
pub fn train_with(
    config: &TrainConfig,
    mut params: ModelParameters,
    mut state: TrainState,
    train_set: &[EncodedFragment],
    validation_set: &[EncodedFragment],
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    if validation_set.is_empty() {
        log::warn!("validation set is empty; learning-rate decay is disabled");
    }
    let mut best_params = params.clone();
    let mut steps = Vec::new();
    let mut log_records = Vec::new();
    let mut window = (0.0, 0usize);
    let step_cap = config.max_steps.unwrap_or(usize::MAX);

    'epochs: while state.epoch < config.max_epochs {
        let batches = make_batches(train_set, config.batch_size, config.seed.wrapping_add(state.epoch as u64))?;
        while state.batch_in_epoch < batches.len() {
            if state.step >= step_cap {
                break 'epochs;
            }
            let batch = &batches[state.batch_in_epoch];
            let diverged = |reason: String| Error::Diverged {
                step: state.step + 1,
                reason,
            };
            let (loss, mut grads) = batch_gradients(&params, batch)?;
            if !loss.is_finite() {
                return Err(diverged(format!(
                    "batch loss is {loss} (epoch {}, batch {}, lr {})",
                    state.epoch, state.batch_in_epoch, state.lr
                )));
            }
            let grad_norm = clip_gradients(&mut grads, config.clip_norm).map_err(|e| match e {
                Error::Diverged { reason, .. } => diverged(reason),
                other => other,
            })?;
            let clipped_norm = global_norm(&grads);
            sgd_step(&mut params, &grads, state.lr)?;
            state.step += 1;
            state.batch_in_epoch += 1;
            let tokens = batch.label_count();
            window.0 += loss * tokens as f64;
            window.1 += tokens;
            steps.push(StepRecord {
                step: state.step,
                epoch: state.epoch,
                lr: state.lr,
                loss,
                grad_norm,
                clipped_norm,
            });
            if state.step % config.checkpoint_interval == 0 {
                evaluate(
                    config,
                    &params,
                    &mut best_params,
                    &mut state,
                    &mut window,
                    validation_set,
                    &mut log_records,
                    observer,
                )?;
            }
        }
        state.epoch += 1;
        state.batch_in_epoch = 0;
    }
    if window.1 > 0 {
        evaluate(
            config,
            &params,
            &mut best_params,
            &mut state,
            &mut window,
            validation_set,
            &mut log_records,
            observer,
        )?;
    }
    if validation_set.is_empty() {
        best_params = params.clone();
    }
    Ok(TrainOutcome {
        params,
        best_params,
        state,
        steps,
        log: log_records,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    config: &TrainConfig,
    params: &ModelParameters,
    best_params: &mut ModelParameters,
    state: &mut TrainState,
    window: &mut (f64, usize),
    validation_set: &[EncodedFragment],
    log_records: &mut Vec<LogRecord>,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    let train_loss = window.0 / window.1 as f64;
    *window = (0.0, 0);
    let lr = state.lr;
    let validation_loss = if validation_set.is_empty() {
        None
    } else {
        let loss = dataset_loss(params, validation_set)?.mean();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: state.step,
                reason: format!("validation loss is {loss}"),
            });
        }
        if loss < state.best_validation {
            *best_params = params.clone();
            observer.on_best(params, state)?;
        }
        maybe_decay(state, config, loss);
        Some(loss)
    };
    let record = LogRecord {
        step: state.step,
        epoch: state.epoch,
        lr,
        train_loss,
        validation_loss,
        validation_perplexity: validation_loss.map(f64::exp),
    };
    log::info!("{record}");
    observer.on_evaluation(&record, params, state)?;
    log_records.push(record);
    Ok(())
}

const STATE_MAGIC: &[u8; 4] = b"DRNS";
const STATE_VERSION: u32 = 1;

/// Sidecar with the schedule state, in the checkpoint's binary conventions.
pub fn write_train_state<W: Write>(state: &TrainState, mut w: W) -> Result<()> {
    w.write_all(STATE_MAGIC)?;
    put_u32(&mut w, STATE_VERSION)?;
    put_f64(&mut w, state.lr)?;
    put_u64(&mut w, state.step as u64)?;
    put_u64(&mut w, state.epoch as u64)?;
    put_u64(&mut w, state.batch_in_epoch as u64)?;
    put_f64(&mut w, state.best_validation)?;
    put_u64(&mut w, state.stale_evaluations as u64)?;
    put_u32(&mut w, state.decay_events)?;
    put_u32(&mut w, state.recent_validation.len() as u32)?;
    for &v in &state.recent_validation {
        put_f64(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_train_state<R: Read>(mut r: R) -> Result<TrainState> {
    expect_magic(&mut r, STATE_MAGIC, "training state")?;
    let version = get_u32(&mut r)?;
    if version != STATE_VERSION {
        return Err(Error::Format(format!("unsupported training state version {version}")));
    }
    let lr = get_f64(&mut r)?;
    let step = get_usize(&mut r)?;
    let epoch = get_usize(&mut r)?;
    let batch_in_epoch = get_usize(&mut r)?;
    let best_validation = get_f64(&mut r)?;
    let stale_evaluations = get_u64(&mut r)? as usize;
    let decay_events = get_u32(&mut r)?;
    let count = get_u32(&mut r)? as usize;
    let recent_validation = (0..count).map(|_| get_f64(&mut r)).collect::<Result<Vec<_>>>()?;
    Ok(TrainState {
        lr,
        step,
        epoch,
        batch_in_epoch,
        best_validation,
        recent_validation,
        stale_evaluations,
        decay_events,
    })
}
