//! Per-feature quantile mapping `x' = F_target⁻¹(F_source(x))`.
//!
//! Each marginal is matched independently; correlations are left alone.

use crate::dataset::{EventTable, Provenance};
use crate::error::{Error, Result};

/// Piecewise-linear monotone map between two empirical distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileMap {
    source: Vec<f64>,
    target: Vec<f64>,
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Contract(
            "quantile map needs nonempty samples".into(),
        ));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

impl QuantileMap {
    pub fn fit(source: &[f64], target: &[f64]) -> Result<Self> {
        Ok(Self {
            source: sorted(source)?,
            target: sorted(target)?,
        })
    }

    /// Empirical CDF in [0, 1] with sorted sample `k` at `k/(n−1)`;
    /// tied samples share the midpoint of their positions.
    fn cdf(&self, x: f64) -> f64 {
        let s = &self.source;
        let n = s.len();
        if n == 1 {
            return 0.5;
        }
        if x <= s[0] || x >= s[n - 1] {
            let lo = s.partition_point(|&v| v < x);
            let hi = s.partition_point(|&v| v <= x);
            if hi > lo {
                return (lo + hi - 1) as f64 / 2.0 / (n - 1) as f64;
            }
            return if x < s[0] { 0.0 } else { 1.0 };
        }
        let lo = s.partition_point(|&v| v < x);
        let hi = s.partition_point(|&v| v <= x);
        let pos = if hi > lo {
            (lo + hi - 1) as f64 / 2.0
        } else {
            let k = lo - 1;
            k as f64 + (x - s[k]) / (s[k + 1] - s[k])
        };
        pos / (n - 1) as f64
    }

    fn inverse(&self, u: f64) -> f64 {
        let t = &self.target;
        let m = t.len();
        if m == 1 {
            return t[0];
        }
        let p = u.clamp(0.0, 1.0) * (m - 1) as f64;
        let k = (p.floor() as usize).min(m - 2);
        let f = p - k as f64;
        if f == 0.0 {
            t[k]
        } else {
            t[k] + f * (t[k + 1] - t[k])
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.inverse(self.cdf(x))
    }
}

/// Quantile-maps the listed features of `source` onto `target`. Zero-protected
/// features are refused unless `exclude_sentinels`, in which case padding
/// entries are left at 0 and excluded from both distributions.
pub fn quantile_baseline(
    source: &EventTable,
    target: &EventTable,
    features: &[usize],
    exclude_sentinels: bool,
) -> Result<EventTable> {
    let schema = source.schema();
    if schema.hash() != target.schema().hash() {
        return Err(Error::Schema("source and target schemas differ".into()));
    }
    let d = schema.len();
    let mut values = source.values().clone();
    for &j in features {
        if j >= d {
            return Err(Error::Config(format!("feature index {j} out of range")));
        }
        let protect = schema.feature(j).zero_protected;
        if protect && !exclude_sentinels {
            return Err(Error::Config(format!(
                "feature `{}` carries padding sentinels; pass the exclusion flag to map only its valid entries",
                schema.feature(j).name
            )));
        }
        let map = QuantileMap::fit(&source.column_valid(j), &target.column_valid(j))?;
        let data = values.data_mut();
        for i in 0..source.n_events() {
            let v = &mut data[i * d + j];
            if !(protect && *v == 0.0) {
                *v = map.apply(*v);
            }
        }
    }
    source.with_values(values, Provenance::Transformed)
}
