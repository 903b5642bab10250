//! JSON model container.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureResidualModel, GlobalResidualModel, MlpParams, TwoStepModel};
use crate::autodiff::Tensor;
use crate::dataset::{FeatureSchema, Standardizer};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "rescorr-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Global,
    Twostep,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Global => "global",
            ModelKind::Twostep => "twostep",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Global(GlobalResidualModel),
    TwoStep(TwoStepModel),
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Global(_) => ModelKind::Global,
            TrainedModel::TwoStep(_) => ModelKind::Twostep,
        }
    }

    /// Final output on standardized inputs.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            TrainedModel::Global(m) => m.forward(x),
            TrainedModel::TwoStep(m) => Ok(m.forward(x)?.1),
        }
    }

    /// Largest possible |x' − x| per feature.
    pub fn budgets(&self) -> Vec<f64> {
        let global = |m: &GlobalResidualModel| -> Vec<f64> {
            m.alpha
                .iter()
                .zip(&m.mask)
                .map(|(a, &k)| if k { *a } else { 0.0 })
                .collect()
        };
        match self {
            TrainedModel::Global(m) => global(m),
            TrainedModel::TwoStep(m) => global(&m.stage2)
                .into_iter()
                .zip(&m.stage1)
                .map(|(b, s)| b + s.as_ref().map_or(0.0, |s| s.alpha))
                .collect(),
        }
    }
}

/// A trained model together with the schema and standardization it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub schema: FeatureSchema,
    pub standardizer: Standardizer,
    pub model: TrainedModel,
}

impl ModelBundle {
    /// Transforms physical-unit events; padding sentinels stay exactly 0.
    pub fn transform_physical(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.standardizer.apply(x)?;
        let out = self.model.transform(&z)?;
        self.standardizer.invert(&out)
    }
}

#[derive(Serialize, Deserialize)]
struct MlpRecord {
    sizes: Vec<usize>,
    params: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct GlobalRecord {
    alpha: Vec<f64>,
    mask: Vec<bool>,
    zero_protect: Vec<bool>,
    mlp: MlpRecord,
}

#[derive(Serialize, Deserialize)]
struct FeatureRecord {
    feature: usize,
    context: Vec<usize>,
    alpha: f64,
    zero_protect: bool,
    mlp: MlpRecord,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    schema_hash: String,
    kind: ModelKind,
    schema: FeatureSchema,
    standardizer: Standardizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    global: Option<GlobalRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stage1: Option<Vec<Option<FeatureRecord>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stage2: Option<GlobalRecord>,
}

fn mlp_record(m: &MlpParams) -> MlpRecord {
    let params = m
        .layers()
        .iter()
        .flat_map(|(w, b)| w.data().iter().chain(b.data()))
        .map(|v| format!("{v:.16e}"))
        .collect();
    MlpRecord {
        sizes: m.sizes().to_vec(),
        params,
    }
}

fn mlp_from(r: &MlpRecord) -> Result<MlpParams> {
    if r.sizes.len() < 2 {
        return Err(Error::Format(
            "network needs at least two layer sizes".into(),
        ));
    }
    let want: usize = r.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if r.params.len() != want {
        return Err(Error::Format(format!(
            "expected {want} parameters, found {}",
            r.params.len()
        )));
    }
    let vals = r
        .params
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad parameter `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut at = 0;
    let mut layers = Vec::new();
    for w in r.sizes.windows(2) {
        let wn = w[0] * w[1];
        let wt = Tensor::new(w[0], w[1], vals[at..at + wn].to_vec())?;
        let bt = Tensor::new(1, w[1], vals[at + wn..at + wn + w[1]].to_vec())?;
        at += wn + w[1];
        layers.push((wt, bt));
    }
    MlpParams::from_layers(layers).map_err(|e| Error::Format(e.to_string()))
}

fn global_record(m: &GlobalResidualModel) -> GlobalRecord {
    GlobalRecord {
        alpha: m.alpha.clone(),
        mask: m.mask.clone(),
        zero_protect: m.zero_protect.clone(),
        mlp: mlp_record(&m.mlp),
    }
}

fn global_from(r: &GlobalRecord) -> Result<GlobalResidualModel> {
    GlobalResidualModel::from_parts(
        mlp_from(&r.mlp)?,
        r.alpha.clone(),
        r.mask.clone(),
        r.zero_protect.clone(),
    )
    .map_err(|e| Error::Format(e.to_string()))
}

pub fn save_model(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let kind = bundle.model.kind();
    let mut file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        schema_hash: bundle.schema.hash(),
        kind,
        schema: bundle.schema.clone(),
        standardizer: bundle.standardizer.clone(),
        global: None,
        stage1: None,
        stage2: None,
    };
    match &bundle.model {
        TrainedModel::Global(m) => file.global = Some(global_record(m)),
        TrainedModel::TwoStep(m) => {
            file.stage1 = Some(
                m.stage1
                    .iter()
                    .map(|s| {
                        s.as_ref().map(|s| FeatureRecord {
                            feature: s.feature,
                            context: s.context.clone(),
                            alpha: s.alpha,
                            zero_protect: s.zero_protect,
                            mlp: mlp_record(&s.mlp),
                        })
                    })
                    .collect(),
            );
            file.stage2 = Some(global_record(&m.stage2));
        }
    }
    let text = serde_json::to_string_pretty(&file)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a model file. With `expected_kind` set, a different kind is an error;
/// with `expected_schema` set, the schema hash must match.
pub fn load_model(
    path: &Path,
    expected_kind: Option<ModelKind>,
    expected_schema: Option<&FeatureSchema>,
) -> Result<ModelBundle> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported container {} v{}",
            path.display(),
            file.format,
            file.version
        )));
    }
    if file.schema.hash() != file.schema_hash {
        return Err(Error::Format(format!(
            "{}: stored schema does not match its hash",
            path.display()
        )));
    }
    if let Some(s) = expected_schema {
        if s.hash() != file.schema_hash {
            return Err(Error::Compatibility(format!(
                "model was trained on schema {} but the data has schema {}",
                file.schema_hash,
                s.hash()
            )));
        }
    }
    if let Some(k) = expected_kind {
        if k != file.kind {
            return Err(Error::Kind {
                expected: k.as_str().into(),
                found: file.kind.as_str().into(),
            });
        }
    }
    let d = file.schema.len();
    let model = match file.kind {
        ModelKind::Global => {
            let r = file
                .global
                .as_ref()
                .ok_or_else(|| Error::Format("missing `global` section".into()))?;
            TrainedModel::Global(global_from(r)?)
        }
        ModelKind::Twostep => {
            let s1 = file
                .stage1
                .as_ref()
                .ok_or_else(|| Error::Format("missing `stage1` section".into()))?;
            let s2 = file
                .stage2
                .as_ref()
                .ok_or_else(|| Error::Format("missing `stage2` section".into()))?;
            let stage1 = s1
                .iter()
                .map(|r| {
                    r.as_ref()
                        .map(|r| {
                            FeatureResidualModel::from_parts(
                                r.feature,
                                r.context.clone(),
                                mlp_from(&r.mlp)?,
                                r.alpha,
                                r.zero_protect,
                            )
                            .map_err(|e| Error::Format(e.to_string()))
                        })
                        .transpose()
                })
                .collect::<Result<Vec<_>>>()?;
            let m = TwoStepModel::new(stage1, global_from(s2)?)
                .map_err(|e| Error::Format(e.to_string()))?;
            TrainedModel::TwoStep(m)
        }
    };
    let dim = match &model {
        TrainedModel::Global(m) => m.dim(),
        TrainedModel::TwoStep(m) => m.dim(),
    };
    if dim != d || file.standardizer.len() != d {
        return Err(Error::Format(
            "model, standardizer and schema disagree on the feature count".into(),
        ));
    }
    Ok(ModelBundle {
        schema: file.schema,
        standardizer: file.standardizer,
        model,
    })
}
