use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::FeatureSchema;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Source,
    Target,
    Transformed,
}

/// N×d sample of events with its schema.
#[derive(Clone, Debug, PartialEq)]
pub struct EventTable {
    schema: FeatureSchema,
    values: Tensor,
    provenance: Provenance,
    seed: u64,
}

impl EventTable {
    pub fn new(
        schema: FeatureSchema,
        values: Tensor,
        provenance: Provenance,
        seed: u64,
    ) -> Result<Self> {
        if values.cols() != schema.len() {
            return Err(Error::Dimension(format!(
                "table has {} columns, schema has {} features",
                values.cols(),
                schema.len()
            )));
        }
        for j in 0..schema.len() {
            let azimuth = schema.is_azimuth(j);
            for i in 0..values.rows() {
                let v = values.get(i, j);
                if !v.is_finite() {
                    return Err(Error::Contract(format!(
                        "non-finite value in row {i}, feature `{}`",
                        schema.feature(j).name
                    )));
                }
                if azimuth && !(v > -PI && v <= PI) {
                    return Err(Error::Contract(format!(
                        "azimuth `{}` outside (−π, π] in row {i}: {v}",
                        schema.feature(j).name
                    )));
                }
            }
        }
        Ok(Self {
            schema,
            values,
            provenance,
            seed,
        })
    }

    pub fn from_rows(
        schema: FeatureSchema,
        rows: &[Vec<f64>],
        provenance: Provenance,
        seed: u64,
    ) -> Result<Self> {
        let t = if rows.is_empty() {
            Tensor::zeros(0, schema.len())
        } else {
            Tensor::from_rows(rows)?
        };
        Self::new(schema, t, provenance, seed)
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_events(&self) -> usize {
        self.values.rows()
    }

    pub fn n_features(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.column_values(j)
    }

    /// Values of column `j` that are not padding sentinels.
    pub fn column_valid(&self, j: usize) -> Vec<f64> {
        let protect = self.schema.feature(j).zero_protected;
        (0..self.n_events())
            .map(|i| self.get(i, j))
            .filter(|&v| !(protect && v == 0.0))
            .collect()
    }

    pub fn is_sentinel(&self, i: usize, j: usize) -> bool {
        self.schema.feature(j).zero_protected && self.get(i, j) == 0.0
    }

    /// Rows containing no sentinel entry.
    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.n_events())
            .filter(|&i| (0..self.n_features()).all(|j| !self.is_sentinel(i, j)))
            .collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> EventTable {
        EventTable {
            schema: self.schema.clone(),
            values: self.values.select_rows(idx),
            provenance: self.provenance,
            seed: self.seed,
        }
    }

    /// Same schema and seed, new values and provenance.
    pub fn with_values(&self, values: Tensor, provenance: Provenance) -> Result<EventTable> {
        EventTable::new(self.schema.clone(), values, provenance, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FeatureKind, FeatureSpec};

    fn schema() -> FeatureSchema {
        FeatureSchema::new(vec![
            FeatureSpec::new("pt", FeatureKind::Momentum).protected(),
            FeatureSpec::new("phi", FeatureKind::Azimuth),
        ])
        .unwrap()
    }

    #[test]
    fn rejects_azimuth_out_of_range() {
        let bad = EventTable::from_rows(schema(), &[vec![1.0, 3.5]], Provenance::Source, 0);
        assert!(bad.is_err());
        let edge = EventTable::from_rows(schema(), &[vec![1.0, PI]], Provenance::Source, 0);
        assert!(edge.is_ok());
        let neg = EventTable::from_rows(schema(), &[vec![1.0, -PI]], Provenance::Source, 0);
        assert!(neg.is_err());
    }

    #[test]
    fn sentinel_helpers() {
        let t = EventTable::from_rows(
            schema(),
            &[vec![0.0, 0.1], vec![2.0, 0.0]],
            Provenance::Source,
            0,
        )
        .unwrap();
        assert!(t.is_sentinel(0, 0));
        assert!(!t.is_sentinel(1, 1));
        assert_eq!(t.column_valid(0), vec![2.0]);
        assert_eq!(t.complete_rows(), vec![1]);
    }
}
