//! JSON run configuration shared by all commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{FeatureSchema, ToyConfig};
use crate::error::{Error, Result};
use crate::evaluation::ClassifierSpec;
use crate::losses::{HistogramDefaults, HistogramSpec};
use crate::observables::{ObjectSpec, ObservableSpec, ResolvedObject, ResolvedObservable};
use crate::training::{TrainConfig, TrainSetup};
use crate::util::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyPair {
    pub n: usize,
    pub source: ToyConfig,
    pub target: ToyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: FeatureSchema,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub observables: Vec<ObservableSpec>,
    /// Histogram per feature name, in physical units.
    #[serde(default)]
    pub feature_histograms: BTreeMap<String, HistogramSpec>,
    #[serde(default)]
    pub histogram_defaults: HistogramDefaults,
    /// Stage-1 context per feature name; object-local contexts when absent.
    #[serde(default)]
    pub contexts: Option<BTreeMap<String, Vec<String>>>,
    #[serde(default)]
    pub toy: Option<ToyPair>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub classifier: ClassifierSpec,
    /// Features mapped by the quantile baseline; all features when absent.
    #[serde(default)]
    pub quantile_features: Option<Vec<String>>,
    /// Lets the quantile baseline map padded features on their valid entries.
    #[serde(default)]
    pub quantile_exclude_sentinels: bool,
    #[serde(default)]
    pub paths: Paths,
    /// Global seed; when set, the training and classifier seeds derive from it.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Default file locations; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub transformed: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Cross-referenced pieces of a validated configuration.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub objects: Vec<ResolvedObject>,
    pub observables: Vec<ResolvedObservable>,
    pub feature_histograms: Vec<Option<HistogramSpec>>,
    pub contexts: Option<Vec<Vec<usize>>>,
    pub quantile_features: Vec<usize>,
}

/// Sets `a.b.c = raw` in a JSON document; `raw` is parsed as JSON, falling back to a string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::Config(format!(
            "override `{assignment}` is not of the form key=value"
        ))
    })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    if value.is_object() || value.is_array() {
        return Err(Error::Config(format!("override `{path}` must be a scalar")));
    }
    let keys: Vec<&str> = path.split('.').collect();
    let mut cur = doc;
    for k in &keys[..keys.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path `{path}` crosses a non-object")))?;
        cur = obj
            .entry(k.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override path `{path}` crosses a non-object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Reads a config file and applies `key=value` overrides before parsing.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut doc: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_seed();
        Ok(cfg)
    }

    /// Replaces every component seed with one derived from the global seed.
    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.train.seed = derive_seed(s, 1);
            self.classifier.seed = derive_seed(s, 2);
            if let Some(t) = &mut self.toy {
                t.source.seed = derive_seed(s, 3);
                t.target.seed = derive_seed(s, 4);
            }
        }
    }

    /// Checks every cross-reference; nothing else should run before this.
    pub fn validate(&self) -> Result<Resolved> {
        let schema = &self.schema;
        let objects = self
            .objects
            .iter()
            .map(|o| o.resolve(schema))
            .collect::<Result<Vec<_>>>()?;
        let observables = self
            .observables
            .iter()
            .map(|o| o.resolve(&objects))
            .collect::<Result<Vec<_>>>()?;
        for o in &observables {
            if let Some(h) = &o.histogram {
                h.validate()?;
            }
        }
        let idx = |name: &str, what: &str| {
            schema
                .index_of(name)
                .ok_or_else(|| Error::Config(format!("{what} references unknown feature `{name}`")))
        };
        let mut feature_histograms = vec![None; schema.len()];
        for (name, spec) in &self.feature_histograms {
            spec.validate()?;
            feature_histograms[idx(name, "feature_histograms")?] = Some(*spec);
        }
        let contexts = self
            .contexts
            .as_ref()
            .map(|m| {
                let mut out: Vec<Vec<usize>> = (0..schema.len()).map(|j| vec![j]).collect();
                for (name, ctx) in m {
                    let j = idx(name, "contexts")?;
                    out[j] = ctx
                        .iter()
                        .map(|c| idx(c, "contexts"))
                        .collect::<Result<_>>()?;
                    if out[j].is_empty() {
                        return Err(Error::Config(format!("context of `{name}` is empty")));
                    }
                }
                Ok(out)
            })
            .transpose()?;
        let quantile_features = match &self.quantile_features {
            Some(v) => v
                .iter()
                .map(|n| idx(n, "quantile_features"))
                .collect::<Result<_>>()?,
            None => (0..schema.len()).collect(),
        };
        if let Some(t) = &self.toy {
            for (which, c) in [("source", &t.source), ("target", &t.target)] {
                if c.dim() != schema.len() {
                    return Err(Error::Config(format!(
                        "toy.{which} has {} marginals, schema has {} features",
                        c.dim(),
                        schema.len()
                    )));
                }
                c.validate()
                    .map_err(|e| Error::Config(format!("toy.{which}.correlation matrix: {e}")))?;
            }
        }
        self.histogram_defaults_valid()?;
        self.train.validate()?;
        self.classifier.validate()?;
        Ok(Resolved {
            objects,
            observables,
            feature_histograms,
            contexts,
            quantile_features,
        })
    }

    fn histogram_defaults_valid(&self) -> Result<()> {
        let h = &self.histogram_defaults;
        if h.bins < 2
            || !(h.temperature > 0.0)
            || !(0.0 <= h.lo_percentile
                && h.lo_percentile < h.hi_percentile
                && h.hi_percentile <= 100.0)
        {
            return Err(Error::Config(
                "histogram_defaults: need bins ≥ 2, temperature > 0, 0 ≤ lo < hi ≤ 100".into(),
            ));
        }
        Ok(())
    }

    pub fn train_setup(&self, r: &Resolved) -> TrainSetup {
        TrainSetup {
            observables: r.observables.clone(),
            feature_histograms: r.feature_histograms.clone(),
            histogram_defaults: self.histogram_defaults,
            object_groups: r
                .objects
                .iter()
                .map(|o| {
                    [Some(o.pt), o.eta, Some(o.phi)]
                        .into_iter()
                        .flatten()
                        .collect()
                })
                .collect(),
            contexts: r.contexts.clone(),
        }
    }
}
