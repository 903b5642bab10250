use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Momentum,
    Pseudorapidity,
    /// Periodic on (−π, π].
    Azimuth,
    Energy,
    Other,
}

fn default_alpha() -> f64 {
    0.5
}

fn default_one() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// One column of an event table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Maximal correction in standardized units.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Movement-penalty weight.
    #[serde(default = "default_one")]
    pub weight: f64,
    /// Whether the feature may be transformed at all.
    #[serde(default = "default_true")]
    pub mask: bool,
    /// Exact 0.0 marks a padded entry that must never move.
    #[serde(default)]
    pub zero_protected: bool,
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, kind: FeatureKind) -> Self {
        Self {
            name: name.into(),
            kind,
            alpha: default_alpha(),
            weight: 1.0,
            mask: true,
            zero_protected: false,
        }
    }

    pub fn alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn masked(mut self, mask: bool) -> Self {
        self.mask = mask;
        self
    }

    pub fn protected(mut self) -> Self {
        self.zero_protected = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FeatureSpec>", into = "Vec<FeatureSpec>")]
pub struct FeatureSchema {
    features: Vec<FeatureSpec>,
}

impl TryFrom<Vec<FeatureSpec>> for FeatureSchema {
    type Error = Error;

    fn try_from(features: Vec<FeatureSpec>) -> Result<Self> {
        FeatureSchema::new(features)
    }
}

impl From<FeatureSchema> for Vec<FeatureSpec> {
    fn from(s: FeatureSchema) -> Self {
        s.features
    }
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for f in &features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate feature name `{}`",
                    f.name
                )));
            }
            if !(f.alpha >= 0.0) || !f.alpha.is_finite() {
                return Err(Error::Schema(format!(
                    "feature `{}`: alpha must be ≥ 0",
                    f.name
                )));
            }
            if !(f.weight >= 0.0) || !f.weight.is_finite() {
                return Err(Error::Schema(format!(
                    "feature `{}`: weight must be ≥ 0",
                    f.name
                )));
            }
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn feature(&self, j: usize) -> &FeatureSpec {
        &self.features[j]
    }

    pub fn names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.features.iter().map(|f| f.alpha).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.features.iter().map(|f| f.weight).collect()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.features.iter().map(|f| f.mask).collect()
    }

    pub fn zero_protect(&self) -> Vec<bool> {
        self.features.iter().map(|f| f.zero_protected).collect()
    }

    pub fn is_azimuth(&self, j: usize) -> bool {
        self.features[j].kind == FeatureKind::Azimuth
    }

    /// Hex SHA-256 over names, kinds and protection flags. Correction budgets
    /// and weights are excluded: they may change between runs on one dataset.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.features {
            h.update(f.name.as_bytes());
            h.update([0u8]);
            h.update(format!("{:?}", f.kind).as_bytes());
            h.update([f.zero_protected as u8, 0xff]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
