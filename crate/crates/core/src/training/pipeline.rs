use serde::{Deserialize, Serialize};

use super::checkpoint::{self, Checkpoint, CheckpointPolicy};
use super::{run_loop, BatchSource, LoopSettings, LoopState, Part, TrainConfig, TrainLog};
use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::{EventTable, FeatureSchema, Standardizer};
use crate::error::{Error, Result};
use crate::losses::{
    composite_loss, hist_loss, pearson_values, valid_mask, HistogramDefaults, HistogramSpec,
    LossBreakdown, LossContext, LossMode, TargetTemplate,
};
use crate::models::{
    default_context, FeatureResidualModel, GlobalResidualModel, ModelBundle, ModelKind,
    TrainedModel, TwoStepModel,
};
use crate::observables::ResolvedObservable;
use crate::par;
use crate::util::derive_seed;

const TAG_SPLIT: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_FEATURE: u64 = 0x100;

/// Problem definition shared by all training modes.
#[derive(Clone, Debug, Default)]
pub struct TrainSetup {
    pub observables: Vec<ResolvedObservable>,
    /// Per-feature histogram in physical units; empty or `None` entries use the defaults.
    pub feature_histograms: Vec<Option<HistogramSpec>>,
    pub histogram_defaults: HistogramDefaults,
    /// Feature indices of each physics object, used for stage-1 contexts.
    pub object_groups: Vec<Vec<usize>>,
    /// Explicit stage-1 context sets, one per feature.
    pub contexts: Option<Vec<Vec<usize>>>,
}

impl TrainSetup {
    pub fn context(&self, j: usize) -> Vec<usize> {
        match &self.contexts {
            Some(c) => c[j].clone(),
            None => default_context(j, &self.object_groups),
        }
    }
}

/// Standardized data and target templates.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub schema: FeatureSchema,
    pub standardizer: Standardizer,
    pub train: Tensor,
    pub val: Tensor,
    pub target: Tensor,
    pub feature_templates: Vec<TargetTemplate>,
    pub observables: Vec<(ResolvedObservable, TargetTemplate)>,
    pub target_correlation: Tensor,
}

fn std_spec(spec: &HistogramSpec, st: &Standardizer, j: usize) -> Result<HistogramSpec> {
    if st.azimuth()[j] {
        return Ok(*spec);
    }
    let (m, s) = (st.means()[j], st.scales()[j]);
    HistogramSpec::new(
        (spec.lo - m) / s,
        (spec.hi - m) / s,
        spec.bins,
        spec.temperature,
    )
}

fn valid_values(x: &Tensor, j: usize, protect: bool) -> Vec<f64> {
    x.column_values(j)
        .into_iter()
        .filter(|v| !(protect && *v == 0.0))
        .collect()
}

/// Standardizes, splits the source, and builds all target templates.
pub fn prepare(
    source: &EventTable,
    target: &EventTable,
    setup: &TrainSetup,
    cfg: &TrainConfig,
) -> Result<Prepared> {
    cfg.validate()?;
    let schema = source.schema().clone();
    if schema.hash() != target.schema().hash() {
        return Err(Error::Schema("source and target schemas differ".into()));
    }
    let d = schema.len();
    if !setup.feature_histograms.is_empty() && setup.feature_histograms.len() != d {
        return Err(Error::Config(format!(
            "expected {d} feature histogram entries"
        )));
    }
    if let Some(c) = &setup.contexts {
        if c.len() != d || c.iter().flatten().any(|&k| k >= d) || c.iter().any(Vec::is_empty) {
            return Err(Error::Config(
                "stage-1 contexts must list valid features for every feature".into(),
            ));
        }
    }
    let standardizer = Standardizer::fit(source)?;
    let src = standardizer.apply_table(source)?;
    let tgt = standardizer.apply_table(target)?;
    let protect = schema.zero_protect();
    let feature_templates = (0..d)
        .map(|j| {
            let t = valid_values(&tgt, j, protect[j]);
            let spec = match setup.feature_histograms.get(j).copied().flatten() {
                Some(s) => std_spec(&s, &standardizer, j)?,
                None => setup
                    .histogram_defaults
                    .spec_for(&valid_values(&src, j, protect[j]), &t)?,
            };
            TargetTemplate::from_values(&t, spec)
        })
        .collect::<Result<Vec<_>>>()?;
    let observables = setup
        .observables
        .iter()
        .map(|o| {
            let t = o.values(target)?;
            let spec = match o.histogram {
                Some(s) => s,
                None => setup.histogram_defaults.spec_for(&o.values(source)?, &t)?,
            };
            Ok((o.clone(), TargetTemplate::from_values(&t, spec)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let target_correlation = pearson_values(&tgt)?;
    let (a, b) = super::split_indices(
        src.rows(),
        cfg.split_fraction,
        derive_seed(cfg.seed, TAG_SPLIT),
    )?;
    Ok(Prepared {
        train: src.select_rows(&a),
        val: src.select_rows(&b),
        target: tgt,
        schema,
        standardizer,
        feature_templates,
        observables,
        target_correlation,
    })
}

struct Split<'a> {
    train: &'a Tensor,
    val: &'a Tensor,
}

impl Split<'_> {
    fn batch(&self, part: Part, idx: &[usize]) -> Tensor {
        match part {
            Part::Train => self.train.select_rows(idx),
            Part::Val if idx.len() == self.val.rows() => self.val.clone(),
            Part::Val => self.val.select_rows(idx),
        }
    }
}

impl BatchSource for Split<'_> {
    fn rows(&self, part: Part) -> usize {
        match part {
            Part::Train => self.train.rows(),
            Part::Val => self.val.rows(),
        }
    }

    fn describe(&self, part: Part, idx: &[usize]) -> Option<Tensor> {
        Some(self.batch(part, idx))
    }
}

fn check_bound(before: &Tensor, after: &Tensor, budgets: &[f64]) -> Result<()> {
    let d = before.cols();
    for (k, (x, y)) in before.data().iter().zip(after.data()).enumerate() {
        let slack = 4.0 * f64::EPSILON * x.abs().max(1.0);
        if (y - x).abs() > budgets[k % d] + slack {
            return Err(Error::Contract(format!(
                "correction {} of feature {} exceeds its budget {}",
                y - x,
                k % d,
                budgets[k % d]
            )));
        }
    }
    Ok(())
}

fn settings(cfg: &TrainConfig, lr: f64, seed: u64) -> LoopSettings {
    LoopSettings {
        batch_size: cfg.batch_size,
        learning_rate: lr,
        adam: cfg.adam,
        max_epochs: cfg.max_epochs,
        seed,
    }
}

/// Result of a training call that may pause at a checkpoint.
#[derive(Clone, Debug)]
pub enum Outcome<T> {
    Finished(T),
    /// Stopped after `epoch` completed epochs; resume from the checkpoint.
    Interrupted {
        epoch: usize,
    },
}

impl<T> Outcome<T> {
    pub fn finished(self) -> Result<T> {
        match self {
            Outcome::Finished(t) => Ok(t),
            Outcome::Interrupted { epoch } => {
                Err(Error::State(format!("training paused after epoch {epoch}")))
            }
        }
    }
}

fn global_context(
    prep: &Prepared,
    cfg: &TrainConfig,
    mode: LossMode,
    alpha: &[f64],
) -> LossContext {
    let mask = prep.schema.mask();
    LossContext {
        feature_templates: match mode {
            LossMode::Global => prep
                .feature_templates
                .iter()
                .zip(&mask)
                .map(|(t, &m)| m.then(|| t.clone()))
                .collect(),
            LossMode::Stage2 => vec![None; mask.len()],
        },
        observables: prep.observables.clone(),
        standardizer: prep.standardizer.clone(),
        weights: cfg.weights,
        move_weights: prep.schema.weights(),
        move_alpha: alpha.to_vec(),
        protect: prep.schema.zero_protect(),
        target_correlation: Some(prep.target_correlation.clone()),
    }
}

/// Trains one global residual model on `data` (already standardized; stage-1 output in stage 2).
fn fit_global(
    state: &mut LoopState<GlobalResidualModel>,
    data: &Split<'_>,
    ctx: &LossContext,
    mode: LossMode,
    settings: &LoopSettings,
    on_epoch: impl FnMut(&LoopState<GlobalResidualModel>) -> Result<bool>,
) -> Result<bool> {
    let budgets: Vec<f64> = state
        .model
        .alpha
        .iter()
        .zip(&state.model.mask)
        .map(|(a, &m)| if m { *a } else { 0.0 })
        .collect();
    let loss =
        |tape: &mut Tape, m: &GlobalResidualModel, vars: &[Var], part: Part, idx: &[usize]| {
            let x = tape.constant(data.batch(part, idx));
            let y = m.forward_tape(tape, vars, x)?;
            if part == Part::Val {
                check_bound(tape.value(x), tape.value(y), &budgets)?;
            }
            composite_loss(tape, ctx, mode, x, y)
        };
    run_loop(state, data, settings, loss, on_epoch)
}

fn checkpoint_hook<'a, M>(
    policy: Option<&'a CheckpointPolicy>,
    fingerprint: &'a str,
    kind: ModelKind,
    stage1: Option<&'a (Vec<Option<FeatureResidualModel>>, Vec<Option<TrainLog>>)>,
) -> impl FnMut(&LoopState<M>) -> Result<bool> + 'a
where
    M: crate::models::Parameters + Clone,
{
    move |state: &LoopState<M>| {
        let Some(p) = policy else { return Ok(false) };
        Checkpoint::capture(kind, fingerprint, state, stage1).save(&p.path)?;
        Ok(p.stop_after_epochs.is_some_and(|k| state.epoch >= k))
    }
}

pub fn train_global(
    source: &EventTable,
    target: &EventTable,
    setup: &TrainSetup,
    cfg: &TrainConfig,
    policy: Option<&CheckpointPolicy>,
) -> Result<Outcome<(ModelBundle, TrainLog)>> {
    let prep = prepare(source, target, setup, cfg)?;
    let schema = &prep.schema;
    let model = GlobalResidualModel::new(
        schema.alphas(),
        schema.mask(),
        schema.zero_protect(),
        &cfg.hidden,
        derive_seed(cfg.seed, TAG_INIT),
    )?;
    let fingerprint = checkpoint::fingerprint(cfg, schema, source, target)?;
    let mut state = LoopState::new(model, cfg.patience, "global");
    if let Some(ck) = checkpoint::resume(policy, &fingerprint, ModelKind::Global)? {
        ck.restore(&mut state)?;
    }
    let ctx = global_context(&prep, cfg, LossMode::Global, &schema.alphas());
    let data = Split {
        train: &prep.train,
        val: &prep.val,
    };
    let s = settings(cfg, cfg.learning_rate, derive_seed(cfg.seed, TAG_SHUFFLE));
    let hook = checkpoint_hook(policy, &fingerprint, ModelKind::Global, None);
    if !fit_global(&mut state, &data, &ctx, LossMode::Global, &s, hook)? {
        return Ok(Outcome::Interrupted { epoch: state.epoch });
    }
    let bundle = ModelBundle {
        schema: prep.schema.clone(),
        standardizer: prep.standardizer.clone(),
        model: TrainedModel::Global(state.model),
    };
    Ok(Outcome::Finished((bundle, state.log)))
}

fn new_feature_model(
    prep: &Prepared,
    setup: &TrainSetup,
    j: usize,
    cfg: &TrainConfig,
) -> Result<FeatureResidualModel> {
    let spec = prep.schema.feature(j);
    FeatureResidualModel::new(
        j,
        setup.context(j),
        spec.alpha,
        spec.zero_protected,
        &cfg.stage1_hidden,
        derive_seed(cfg.seed, TAG_FEATURE + 2 * j as u64),
    )
}

/// Stage-1 training of feature `j`: `L_hist,j + λ·E[Δ_j²]` on the original inputs.
pub fn train_feature(
    prep: &Prepared,
    setup: &TrainSetup,
    j: usize,
    cfg: &TrainConfig,
) -> Result<(FeatureResidualModel, TrainLog)> {
    if j >= prep.schema.len() {
        return Err(Error::Dimension(format!("feature index {j} out of range")));
    }
    if !prep.schema.feature(j).mask {
        return Err(Error::Config(format!(
            "feature `{}` is masked",
            prep.schema.feature(j).name
        )));
    }
    let model = new_feature_model(prep, setup, j, cfg)?;
    let template = &prep.feature_templates[j];
    let protect = prep.schema.feature(j).zero_protected;
    let lambda = cfg.stage1_movement();
    let alpha = model.alpha;
    let data = Split {
        train: &prep.train,
        val: &prep.val,
    };
    let loss =
        |tape: &mut Tape, m: &FeatureResidualModel, vars: &[Var], part: Part, idx: &[usize]| {
            let x = tape.constant(data.batch(part, idx));
            let y = m.forward_tape(tape, vars, x)?;
            let xj = tape.column(x, j)?;
            if part == Part::Val {
                check_bound(tape.value(xj), tape.value(y), &[alpha])?;
            }
            let w = protect.then(|| valid_mask(tape.value(xj), &[true]).into_data());
            let h = hist_loss(tape, y, w, template)?;
            let d = tape.sub(y, xj)?;
            let sq = tape.square(d);
            let mv = tape.mean(sq);
            let scaled = tape.scale(mv, lambda);
            let total = tape.add(h, scaled)?;
            let br = LossBreakdown {
                hist: tape.value(h).item(),
                movement: tape.value(mv).item(),
                total: tape.value(total).item(),
                ..LossBreakdown::default()
            };
            Ok((total, br))
        };
    let mut state = LoopState::new(
        model,
        cfg.patience,
        format!("stage1:{}", prep.schema.feature(j).name),
    );
    let s = settings(
        cfg,
        cfg.stage1_learning_rate(),
        derive_seed(cfg.seed, TAG_FEATURE + 2 * j as u64 + 1),
    );
    run_loop(&mut state, &data, &s, loss, |_| Ok(false))?;
    Ok((state.model, state.log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStepLog {
    pub stage1: Vec<Option<TrainLog>>,
    pub stage2: Option<TrainLog>,
}

impl TwoStepLog {
    pub fn json_lines(&self) -> String {
        self.stage1
            .iter()
            .flatten()
            .chain(&self.stage2)
            .map(TrainLog::json_lines)
            .collect()
    }

    pub fn without_timing(&self) -> Self {
        Self {
            stage1: self
                .stage1
                .iter()
                .map(|l| l.as_ref().map(TrainLog::without_timing))
                .collect(),
            stage2: self.stage2.as_ref().map(TrainLog::without_timing),
        }
    }
}

pub fn train_twostep(
    source: &EventTable,
    target: &EventTable,
    setup: &TrainSetup,
    cfg: &TrainConfig,
    policy: Option<&CheckpointPolicy>,
) -> Result<Outcome<(ModelBundle, TwoStepLog)>> {
    let prep = prepare(source, target, setup, cfg)?;
    let schema = &prep.schema;
    let d = schema.len();
    let fingerprint = checkpoint::fingerprint(cfg, schema, source, target)?;
    let resumed = checkpoint::resume(policy, &fingerprint, ModelKind::Twostep)?;

    let stage1: (Vec<Option<FeatureResidualModel>>, Vec<Option<TrainLog>>) = match &resumed {
        Some(ck) => ck.restore_stage1(|j| new_feature_model(&prep, setup, j, cfg))?,
        None => {
            let mask = schema.mask();
            let results = par::map_indices(d, |j| {
                mask[j]
                    .then(|| train_feature(&prep, setup, j, cfg))
                    .transpose()
            });
            let mut models = Vec::with_capacity(d);
            let mut logs = Vec::with_capacity(d);
            for r in results {
                let (m, l) = r?.unzip();
                models.push(m);
                logs.push(l);
            }
            (models, logs)
        }
    };

    let stage2_alpha: Vec<f64> = schema
        .alphas()
        .iter()
        .map(|a| a * cfg.stage2_alpha_scale)
        .collect();
    let mut stage2 = GlobalResidualModel::new(
        stage2_alpha.clone(),
        schema.mask(),
        schema.zero_protect(),
        &cfg.hidden,
        derive_seed(cfg.seed, TAG_INIT),
    )?;
    let mut stage2_log = None;
    if cfg.skip_stage2 {
        stage2.mask = vec![false; d];
    } else {
        let probe = TwoStepModel::new(stage1.0.clone(), stage2.clone())?;
        let x1_train = probe.forward_stage1(&prep.train)?;
        let x1_val = probe.forward_stage1(&prep.val)?;
        let mut state = LoopState::new(stage2, cfg.patience, "stage2");
        if let Some(ck) = &resumed {
            ck.restore(&mut state)?;
        }
        let ctx = global_context(&prep, cfg, LossMode::Stage2, &stage2_alpha);
        let data = Split {
            train: &x1_train,
            val: &x1_val,
        };
        let s = settings(cfg, cfg.learning_rate, derive_seed(cfg.seed, TAG_SHUFFLE));
        let hook = checkpoint_hook(policy, &fingerprint, ModelKind::Twostep, Some(&stage1));
        if !fit_global(&mut state, &data, &ctx, LossMode::Stage2, &s, hook)? {
            return Ok(Outcome::Interrupted { epoch: state.epoch });
        }
        stage2 = state.model;
        stage2_log = Some(state.log);
    }
    let (models, logs) = stage1;
    let bundle = ModelBundle {
        schema: prep.schema.clone(),
        standardizer: prep.standardizer.clone(),
        model: TrainedModel::TwoStep(TwoStepModel::new(models, stage2)?),
    };
    Ok(Outcome::Finished((
        bundle,
        TwoStepLog {
            stage1: logs,
            stage2: stage2_log,
        },
    )))
}
