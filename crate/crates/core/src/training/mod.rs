//! Minibatch optimization: configuration, train/validation split, Adam,
//! early stopping, and the global and two-step training pipelines.

mod checkpoint;
mod pipeline;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::EventTable;
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::models::Parameters;
use crate::util::derive_seed;

pub use checkpoint::CheckpointPolicy;
pub use pipeline::{
    prepare, train_feature, train_global, train_twostep, Outcome, Prepared, TrainSetup, TwoStepLog,
};

/// Smallest batch accepted without `allow_small_batch`.
pub const MIN_BATCH: usize = 5001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Global,
    Twostep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Acknowledges a batch size below [`MIN_BATCH`].
    pub allow_small_batch: bool,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub split_fraction: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub mode: TrainMode,
    /// Hidden layers of the global (and stage-2) network.
    pub hidden: Vec<usize>,
    /// Hidden layers of the stage-1 per-feature networks.
    pub stage1_hidden: Vec<usize>,
    /// Movement weight of the stage-1 loss; `weights.movement` when absent.
    pub stage1_movement: Option<f64>,
    /// Stage-1 learning rate; `learning_rate` when absent.
    pub stage1_learning_rate: Option<f64>,
    pub skip_stage2: bool,
    /// Stage-2 budget as a multiple of each feature's alpha.
    pub stage2_alpha_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8192,
            allow_small_batch: false,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            max_epochs: 200,
            patience: 5,
            split_fraction: 0.8,
            seed: 0,
            weights: LossWeights::default(),
            mode: TrainMode::Global,
            hidden: vec![256; 4],
            stage1_hidden: vec![64; 2],
            stage1_movement: None,
            stage1_learning_rate: None,
            skip_stage2: false,
            stage2_alpha_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || (self.batch_size < MIN_BATCH && !self.allow_small_batch) {
            return Err(Error::Config(format!(
                "batch_size {} is below {MIN_BATCH}; histogram losses need large batches \
                 (set allow_small_batch to override)",
                self.batch_size
            )));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        let lrs = [Some(self.learning_rate), self.stage1_learning_rate];
        if lrs
            .iter()
            .flatten()
            .any(|lr| !(*lr > 0.0) || !lr.is_finite())
        {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "max_epochs and patience must be at least 1".into(),
            ));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(
                "Adam needs β1, β2 in [0, 1) and ε > 0".into(),
            ));
        }
        if !(self.stage2_alpha_scale >= 0.0) || !self.stage2_alpha_scale.is_finite() {
            return Err(Error::Config("stage2_alpha_scale must be ≥ 0".into()));
        }
        if self.stage1_movement.is_some_and(|m| !(m >= 0.0)) {
            return Err(Error::Config("stage1_movement must be ≥ 0".into()));
        }
        self.weights.validate()
    }

    pub fn stage1_movement(&self) -> f64 {
        self.stage1_movement.unwrap_or(self.weights.movement)
    }

    pub fn stage1_learning_rate(&self) -> f64 {
        self.stage1_learning_rate.unwrap_or(self.learning_rate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: String,
    pub epochs: Vec<EpochRecord>,
    pub batches: Vec<BatchRecord>,
    /// 1-based; 0 before the first epoch.
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    pub stop_reason: Option<StopReason>,
}

impl TrainLog {
    pub fn new(stage: impl Into<String>) -> Self {
        Self {
            stage: stage.into(),
            epochs: Vec::new(),
            batches: Vec::new(),
            best_epoch: 0,
            best_val: None,
            stop_reason: None,
        }
    }

    /// Per-batch loss records as JSON lines.
    pub fn json_lines(&self) -> String {
        let mut out = String::new();
        for b in &self.batches {
            let mut v = serde_json::to_value(b).expect("plain record");
            v["stage"] = self.stage.clone().into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }

    /// The log with wall-clock times zeroed, for run-to-run comparisons.
    pub fn without_timing(&self) -> Self {
        let mut l = self.clone();
        l.epochs.iter_mut().for_each(|e| e.wall_time_s = 0.0);
        l
    }
}

/// Deterministic shuffled split into `(train, validation)` with `round(fraction·N)` training rows.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 10 {
        return Err(Error::Contract(format!(
            "need at least 10 events to split, got {n}"
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(k);
    Ok((idx, val))
}

pub fn split_train_val(
    table: &EventTable,
    fraction: f64,
    seed: u64,
) -> Result<(EventTable, EventTable)> {
    let (a, b) = split_indices(table.n_events(), fraction, seed)?;
    Ok((table.select_rows(&a), table.select_rows(&b)))
}

/// First and second moment estimates for each parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update; increments `state.t` first.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(
            "parameter, gradient and state counts differ".into(),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let (g, m, v) = (&grads[k], &mut state.m[k], &mut state.v[k]);
        if g.len() != p.len() || m.len() != p.len() {
            return Err(Error::Dimension(format!(
                "parameter tensor {k}: gradient has the wrong length"
            )));
        }
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records the validation loss of `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if self.best.is_none_or(|b| loss < b) {
            self.best = Some(loss);
            self.best_epoch = epoch;
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// Shuffled batches of `batch_size`; a trailing batch shorter than half is merged into its predecessor.
pub fn make_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches: Vec<Vec<usize>> = idx
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < batch_size / 2) {
        let tail = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(tail);
    }
    batches
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
}

/// Everything the epoch loop carries between epochs.
#[derive(Clone, Debug)]
pub struct LoopState<M> {
    pub model: M,
    pub best: M,
    pub adam: AdamState,
    pub stopper: EarlyStopping,
    pub log: TrainLog,
    /// Completed epochs.
    pub epoch: usize,
    pub finished: bool,
}

impl<M: Parameters + Clone> LoopState<M> {
    pub fn new(model: M, patience: usize, stage: impl Into<String>) -> Self {
        let adam = AdamState::new(&model.tensors());
        Self {
            best: model.clone(),
            model,
            adam,
            stopper: EarlyStopping::new(patience),
            log: TrainLog::new(stage),
            epoch: 0,
            finished: false,
        }
    }
}

/// Settings of one epoch loop.
#[derive(Clone, Copy, Debug)]
pub struct LoopSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub seed: u64,
}

fn batch_diagnostics(x: Option<&Tensor>, br: &LossBreakdown) -> String {
    let mut s = format!("loss terms {br:?}");
    if let Some(x) = x {
        for j in 0..x.cols() {
            let c = x.column_values(j);
            let mean = c.iter().sum::<f64>() / c.len().max(1) as f64;
            let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            s.push_str(&format!(
                "; col {j}: mean {mean:.6e} min {lo:.6e} max {hi:.6e}"
            ));
        }
    }
    s
}

/// Batch data the loop can describe when a loss turns non-finite.
pub trait BatchSource {
    fn rows(&self, part: Part) -> usize;
    fn describe(&self, part: Part, idx: &[usize]) -> Option<Tensor>;
}

/// Runs epochs until early stopping, `max_epochs`, or `on_epoch` asks to pause.
///
/// `loss` builds the loss of the given rows of a part on a fresh tape, with the
/// model parameters recorded as leaves in [`Parameters::tensors`] order.
/// Returns `true` when training finished and `state.model` holds the best parameters.
pub fn run_loop<M, D, F, C>(
    state: &mut LoopState<M>,
    data: &D,
    settings: &LoopSettings,
    loss: F,
    mut on_epoch: C,
) -> Result<bool>
where
    M: Parameters + Clone,
    D: BatchSource,
    F: Fn(&mut Tape, &M, &[Var], Part, &[usize]) -> Result<(Var, LossBreakdown)>,
    C: FnMut(&LoopState<M>) -> Result<bool>,
{
    if state.finished {
        return Ok(true);
    }
    let leaves = |tape: &mut Tape, m: &M| -> Vec<Var> {
        m.tensors()
            .into_iter()
            .map(|t| tape.var(t.clone()))
            .collect()
    };
    let n_val = data.rows(Part::Val);
    let val_idx: Vec<usize> = (0..n_val).collect();
    while state.epoch < settings.max_epochs {
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let batches = make_batches(
            data.rows(Part::Train),
            settings.batch_size,
            derive_seed(settings.seed, epoch as u64),
        );
        let mut train = LossBreakdown::default();
        for (b, idx) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let vars = leaves(&mut tape, &state.model);
            let (l, br) = loss(&mut tape, &state.model, &vars, Part::Train, idx)?;
            if !br.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b + 1,
                    diagnostics: batch_diagnostics(data.describe(Part::Train, idx).as_ref(), &br),
                });
            }
            let mut g = tape.backward(l)?;
            let grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.take(v)).collect();
            adam_step(
                &mut state.model.tensors_mut(),
                &grads,
                &mut state.adam,
                settings.learning_rate,
                &settings.adam,
            )?;
            state.log.batches.push(BatchRecord {
                epoch,
                batch: b + 1,
                loss: br,
            });
            let w = 1.0 / batches.len() as f64;
            train.hist += w * br.hist;
            train.der += w * br.der;
            train.movement += w * br.movement;
            train.corr += w * br.corr;
            train.total += w * br.total;
        }
        let mut tape = Tape::new();
        let vars = leaves(&mut tape, &state.model);
        let (_, val) = loss(&mut tape, &state.model, &vars, Part::Val, &val_idx)?;
        if !val.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: 0,
                diagnostics: batch_diagnostics(data.describe(Part::Val, &val_idx).as_ref(), &val),
            });
        }
        let decision = state.stopper.observe(epoch, val.total);
        if decision == StopDecision::Improved {
            state.best = state.model.clone();
        }
        state.log.best_epoch = state.stopper.best_epoch;
        state.log.best_val = state.stopper.best;
        state.log.epochs.push(EpochRecord {
            epoch,
            train,
            val,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        state.epoch = epoch;
        if decision == StopDecision::Stop {
            state.log.stop_reason = Some(StopReason::Patience);
        } else if epoch == settings.max_epochs {
            state.log.stop_reason = Some(StopReason::MaxEpochs);
        }
        if state.log.stop_reason.is_some() {
            state.model = state.best.clone();
            state.finished = true;
        }
        let pause = on_epoch(state)?;
        if state.finished {
            return Ok(true);
        }
        if pause {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests;
