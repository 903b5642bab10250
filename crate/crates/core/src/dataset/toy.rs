//! Gaussian-copula toy generator for source/target sample pairs.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EventTable, FeatureSchema, Provenance};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::util::normal_cdf;

/// One-dimensional marginal applied to a copula coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Marginal {
    LogNormal {
        mu: f64,
        sigma: f64,
    },
    Normal {
        #[serde(default)]
        mean: f64,
        sigma: f64,
    },
    UniformAzimuth,
}

impl Marginal {
    /// Maps a standard-normal copula coordinate through Φ and the inverse CDF.
    fn from_normal(&self, z: f64) -> f64 {
        match *self {
            // Φ⁻¹(Φ(z)) = z, so skip the round trip through the CDF.
            Marginal::LogNormal { mu, sigma } => (mu + sigma * z).exp(),
            Marginal::Normal { mean, sigma } => mean + sigma * z,
            Marginal::UniformAzimuth => {
                let phi = -PI + 2.0 * PI * normal_cdf(z);
                if phi <= -PI {
                    PI
                } else {
                    phi.min(PI)
                }
            }
        }
    }
}

/// Features zeroed together (an absent object) with the given probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaddingGroup {
    pub features: Vec<usize>,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Copula correlation matrix: symmetric, unit diagonal, positive definite.
    pub correlation: Vec<Vec<f64>>,
    pub marginals: Vec<Marginal>,
    #[serde(default)]
    pub padding: Vec<PaddingGroup>,
    pub seed: u64,
}

impl ToyConfig {
    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    /// Checks shape and symmetry; returns the Cholesky factor.
    pub fn validate(&self) -> Result<Vec<f64>> {
        let d = self.dim();
        if self.correlation.len() != d || self.correlation.iter().any(|r| r.len() != d) {
            return Err(Error::Config(format!("correlation matrix must be {d}×{d}")));
        }
        for i in 0..d {
            if (self.correlation[i][i] - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "correlation matrix diagonal entry {i} is not 1"
                )));
            }
            for j in 0..i {
                if (self.correlation[i][j] - self.correlation[j][i]).abs() > 1e-12 {
                    return Err(Error::Config(format!(
                        "correlation matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        for g in &self.padding {
            if !(0.0..=1.0).contains(&g.probability) {
                return Err(Error::Config("padding probability outside [0, 1]".into()));
            }
            if g.features.iter().any(|&j| j >= d) {
                return Err(Error::Config(
                    "padding group references an unknown feature".into(),
                ));
            }
        }
        let flat: Vec<f64> = self.correlation.concat();
        cholesky(&flat, d)
    }
}

/// Lower-triangular Cholesky factor of a row-major d×d matrix.
pub fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 1e-12 {
                    return Err(Error::Decomposition(
                        "correlation matrix is not positive definite".into(),
                    ));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

pub fn generate_toy(
    schema: &FeatureSchema,
    cfg: &ToyConfig,
    n: usize,
    provenance: Provenance,
) -> Result<EventTable> {
    let d = schema.len();
    if cfg.dim() != d {
        return Err(Error::Config(format!(
            "toy config has {} marginals, schema has {d} features",
            cfg.dim()
        )));
    }
    let l = cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = Vec::with_capacity(n * d);
    let mut eps = vec![0.0; d];
    let mut row = vec![0.0; d];
    for _ in 0..n {
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        for i in 0..d {
            let z: f64 = (0..=i).map(|k| l[i * d + k] * eps[k]).sum();
            row[i] = cfg.marginals[i].from_normal(z);
        }
        for g in &cfg.padding {
            let u: f64 = rng.random();
            if u < g.probability {
                for &j in &g.features {
                    row[j] = 0.0;
                }
            }
        }
        data.extend_from_slice(&row);
    }
    EventTable::new(
        schema.clone(),
        Tensor::new(n, d, data)?,
        provenance,
        cfg.seed,
    )
}

/// Draws `n` source and `n` target events from their respective configs.
pub fn generate_toy_pair(
    schema: &FeatureSchema,
    source: &ToyConfig,
    target: &ToyConfig,
    n: usize,
) -> Result<(EventTable, EventTable)> {
    Ok((
        generate_toy(schema, source, n, Provenance::Source)?,
        generate_toy(schema, target, n, Provenance::Target)?,
    ))
}
