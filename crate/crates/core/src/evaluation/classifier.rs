use serde::{Deserialize, Serialize};

use super::{auc, roc_curve, RocCurve};
use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::{EventTable, FeatureSchema, Provenance, Standardizer};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::models::{init_mlp, MlpParams, TRANSFORM_CHUNK};
use crate::par;
use crate::training::{
    run_loop, split_indices, AdamConfig, BatchSource, LoopSettings, LoopState, Part, TrainLog,
};
use crate::util::derive_seed;

const TAG_SPLIT_POS: u64 = 11;
const TAG_SPLIT_NEG: u64 = 12;
const TAG_VAL: u64 = 13;
const TAG_INIT: u64 = 14;
const TAG_SHUFFLE: u64 = 15;

/// Architecture and optimization settings of the evaluation classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSpec {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of each class used for training (the rest is held out).
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            batch_size: 512,
            learning_rate: 1e-3,
            max_epochs: 100,
            patience: 5,
            split_fraction: 0.8,
            seed: 0,
        }
    }
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "classifier batch_size, max_epochs and patience must be ≥ 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.split_fraction > 0.0 && self.split_fraction < 1.0)
        {
            return Err(Error::Config(
                "classifier learning rate must be > 0 and split fraction in (0, 1)".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("classifier layers must be nonempty".into()));
        }
        Ok(())
    }
}

/// Trained network scoring events as belonging to the positive sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub standardizer: Standardizer,
    pub mlp: MlpParams,
}

impl Classifier {
    /// Sigmoid scores in [0, 1] for physical-unit events.
    pub fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        let z = self.standardizer.apply(x)?;
        let parts = par::map_ranges(z.rows(), TRANSFORM_CHUNK, |r| {
            let idx: Vec<usize> = r.collect();
            let mut tape = Tape::new();
            let vars = self.mlp.vars(&mut tape);
            let v = tape.constant(z.select_rows(&idx));
            let logits = self.mlp.forward(&mut tape, &vars, v)?;
            let s = tape.sigmoid(logits);
            Ok::<_, Error>(tape.value(s).data().to_vec())
        });
        let mut out = Vec::with_capacity(z.rows());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

struct Labeled {
    train: (Tensor, Vec<f64>),
    val: (Tensor, Vec<f64>),
}

impl Labeled {
    fn part(&self, part: Part) -> &(Tensor, Vec<f64>) {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
        }
    }
}

impl BatchSource for Labeled {
    fn rows(&self, part: Part) -> usize {
        self.part(part).0.rows()
    }

    fn describe(&self, part: Part, idx: &[usize]) -> Option<Tensor> {
        Some(self.part(part).0.select_rows(idx))
    }
}

fn stack(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension(
            "samples have different feature counts".into(),
        ));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(a.rows() + b.rows(), a.cols(), data)
}

/// Trains `pos` (label 1) against `neg` (label 0) with binary cross-entropy.
pub fn train_classifier(
    pos: &Tensor,
    neg: &Tensor,
    schema: &FeatureSchema,
    spec: &ClassifierSpec,
) -> Result<(Classifier, TrainLog)> {
    spec.validate()?;
    let pooled = stack(pos, neg)?;
    let labels: Vec<f64> = (0..pooled.rows())
        .map(|i| if i < pos.rows() { 1.0 } else { 0.0 })
        .collect();
    let table = EventTable::new(schema.clone(), pooled, Provenance::Source, spec.seed)?;
    let standardizer = Standardizer::fit(&table)?;
    let z = standardizer.apply_table(&table)?;
    let (tr, va) = split_indices(z.rows(), 0.8, derive_seed(spec.seed, TAG_VAL))?;
    let pick = |idx: &[usize]| {
        (
            z.select_rows(idx),
            idx.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
        )
    };
    let data = Labeled {
        train: pick(&tr),
        val: pick(&va),
    };

    let mut sizes = vec![schema.len()];
    sizes.extend_from_slice(&spec.hidden);
    sizes.push(1);
    let mlp = init_mlp(&sizes, derive_seed(spec.seed, TAG_INIT))?;
    let mut state = LoopState::new(mlp, spec.patience, "classifier");
    let settings = LoopSettings {
        batch_size: spec.batch_size,
        learning_rate: spec.learning_rate,
        adam: AdamConfig::default(),
        max_epochs: spec.max_epochs,
        seed: derive_seed(spec.seed, TAG_SHUFFLE),
    };
    let loss = |tape: &mut Tape, m: &MlpParams, vars: &[Var], part: Part, idx: &[usize]| {
        let (x, y) = data.part(part);
        let (xb, yb) = if part == Part::Val {
            (x.clone(), y.clone())
        } else {
            (x.select_rows(idx), idx.iter().map(|&i| y[i]).collect())
        };
        let xv = tape.constant(xb);
        let logits = m.forward(tape, vars, xv)?;
        let l = tape.bce_with_logits(logits, &yb)?;
        let v = tape.value(l).item();
        Ok((
            l,
            LossBreakdown {
                total: v,
                ..LossBreakdown::default()
            },
        ))
    };
    run_loop(&mut state, &data, &settings, loss, |_| Ok(false))?;
    Ok((
        Classifier {
            standardizer,
            mlp: state.model,
        },
        state.log,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleResult {
    pub auc: f64,
    pub roc: RocCurve,
    pub n_test_a: usize,
    pub n_test_b: usize,
    pub best_epoch: usize,
}

/// Classifier test of `a` (label 1) against `b` (label 0); AUC on held-out events.
pub fn two_sample_test(
    a: &EventTable,
    b: &EventTable,
    spec: &ClassifierSpec,
) -> Result<TwoSampleResult> {
    if a.schema().hash() != b.schema().hash() {
        return Err(Error::Schema(
            "two-sample test needs matching schemas".into(),
        ));
    }
    let (a_tr, a_te) = split_indices(
        a.n_events(),
        spec.split_fraction,
        derive_seed(spec.seed, TAG_SPLIT_POS),
    )?;
    let (b_tr, b_te) = split_indices(
        b.n_events(),
        spec.split_fraction,
        derive_seed(spec.seed, TAG_SPLIT_NEG),
    )?;
    let (clf, log) = train_classifier(
        &a.values().select_rows(&a_tr),
        &b.values().select_rows(&b_tr),
        a.schema(),
        spec,
    )?;
    let sa = clf.scores(&a.values().select_rows(&a_te))?;
    let sb = clf.scores(&b.values().select_rows(&b_te))?;
    Ok(TwoSampleResult {
        auc: auc(&sa, &sb)?,
        roc: roc_curve(&sa, &sb)?,
        n_test_a: sa.len(),
        n_test_b: sb.len(),
        best_epoch: log.best_epoch,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    /// Held-out target against held-out source.
    pub auc_target: f64,
    /// Transformed held-out source against held-out source.
    pub auc_transformed: f64,
    pub delta_auc: f64,
    pub roc_target: RocCurve,
    pub roc_transformed: RocCurve,
    pub best_epoch: usize,
}

/// Trains target (label 1) against source (label 0), then scores held-out
/// target and the transformed images of the held-out source events.
/// `transformed` must be row-aligned with `source`.
pub fn transfer_roc_test(
    source: &EventTable,
    target: &EventTable,
    transformed: &EventTable,
    spec: &ClassifierSpec,
) -> Result<TransferResult> {
    let h = source.schema().hash();
    if target.schema().hash() != h || transformed.schema().hash() != h {
        return Err(Error::Schema("transfer test needs matching schemas".into()));
    }
    if transformed.n_events() != source.n_events() {
        return Err(Error::Dimension(
            "transformed sample must be row-aligned with the source".into(),
        ));
    }
    let (t_tr, t_te) = split_indices(
        target.n_events(),
        spec.split_fraction,
        derive_seed(spec.seed, TAG_SPLIT_POS),
    )?;
    let (s_tr, s_te) = split_indices(
        source.n_events(),
        spec.split_fraction,
        derive_seed(spec.seed, TAG_SPLIT_NEG),
    )?;
    let (clf, log) = train_classifier(
        &target.values().select_rows(&t_tr),
        &source.values().select_rows(&s_tr),
        source.schema(),
        spec,
    )?;
    let st = clf.scores(&target.values().select_rows(&t_te))?;
    let ss = clf.scores(&source.values().select_rows(&s_te))?;
    let sx = clf.scores(&transformed.values().select_rows(&s_te))?;
    let auc_target = auc(&st, &ss)?;
    let auc_transformed = auc(&sx, &ss)?;
    Ok(TransferResult {
        auc_target,
        auc_transformed,
        delta_auc: (auc_target - auc_transformed).abs(),
        roc_target: roc_curve(&st, &ss)?,
        roc_transformed: roc_curve(&sx, &ss)?,
        best_epoch: log.best_epoch,
    })
}
