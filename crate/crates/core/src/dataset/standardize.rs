use serde::{Deserialize, Serialize};

use super::EventTable;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::util::wrap_angle;

const MIN_SCALE: f64 = 1e-8;
/// Stand-in for a valid entry that would otherwise standardize to exactly 0.0
/// and be mistaken for padding. Inverts to the feature mean exactly.
const NUDGE: f64 = f64::MIN_POSITIVE;

/// Per-feature affine map fit on the source sample. Azimuths pass through
/// unscaled; padding sentinels stay exactly 0.0 in both directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    means: Vec<f64>,
    scales: Vec<f64>,
    protect: Vec<bool>,
    azimuth: Vec<bool>,
}

impl Standardizer {
    pub fn fit(table: &EventTable) -> Result<Self> {
        if table.n_events() < 2 {
            return Err(Error::Contract(
                "standardizer needs at least 2 events".into(),
            ));
        }
        let schema = table.schema();
        let mut means = Vec::with_capacity(schema.len());
        let mut scales = Vec::with_capacity(schema.len());
        for j in 0..schema.len() {
            if schema.is_azimuth(j) {
                means.push(0.0);
                scales.push(1.0);
                continue;
            }
            let vals = table.column_valid(j);
            if vals.len() < 2 {
                return Err(Error::Contract(format!(
                    "feature `{}` has fewer than 2 non-sentinel entries",
                    schema.feature(j).name
                )));
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            means.push(mean);
            scales.push(var.sqrt().max(MIN_SCALE));
        }
        Ok(Self {
            means,
            scales,
            protect: schema.zero_protect(),
            azimuth: (0..schema.len()).map(|j| schema.is_azimuth(j)).collect(),
        })
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn protect(&self) -> &[bool] {
        &self.protect
    }

    pub fn azimuth(&self) -> &[bool] {
        &self.azimuth
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.len() {
            return Err(Error::Dimension(format!(
                "standardizer fit on {} features, got {}",
                self.len(),
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let d = self.len();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            for (j, v) in row.iter_mut().enumerate() {
                if self.protect[j] && *v == 0.0 {
                    continue;
                }
                if self.azimuth[j] {
                    continue;
                }
                let z = (*v - self.means[j]) / self.scales[j];
                *v = if self.protect[j] && z == 0.0 {
                    NUDGE
                } else {
                    z
                };
            }
        }
        Tensor::new(x.rows(), d, out)
    }

    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let d = self.len();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            for (j, v) in row.iter_mut().enumerate() {
                if self.protect[j] && *v == 0.0 {
                    continue;
                }
                *v = if self.azimuth[j] {
                    wrap_angle(*v)
                } else {
                    self.means[j] + self.scales[j] * *v
                };
            }
        }
        Tensor::new(x.rows(), d, out)
    }

    pub fn apply_table(&self, table: &EventTable) -> Result<Tensor> {
        self.apply(table.values())
    }
}
