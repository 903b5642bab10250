//! Closure metrics: hard histograms, χ² and KS distances, correlation
//! comparisons, ROC/AUC, and classifier two-sample tests.

mod classifier;
mod report;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataset::EventTable;
use crate::error::{Error, Result};
use crate::losses::{pearson_values, HistogramSpec};

pub use classifier::{
    train_classifier, transfer_roc_test, two_sample_test, Classifier, ClassifierSpec,
    TransferResult, TwoSampleResult,
};
pub use report::{evaluate, EvalInputs, EvalReport, Panel, REPORT_FORMAT, REPORT_SCHEMA};

/// Regularizer of the evaluation χ².
pub const CHI2_EPS: f64 = 1e-12;
/// ROC thresholds evenly spaced on [0, 1].
pub const ROC_GRID: usize = 201;
/// Up to this many scores the empirical scores are added as ROC thresholds.
pub const ROC_EMPIRICAL_MAX: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardHistogram {
    pub fractions: Vec<f64>,
    pub underflow: f64,
    pub overflow: f64,
}

/// Fractions of all values per bin; bins are `[e_k, e_{k+1})` except the last, which includes `hi`.
pub fn hard_histogram(values: &[f64], spec: &HistogramSpec) -> HardHistogram {
    let mut counts = vec![0u64; spec.bins];
    let (mut under, mut over) = (0u64, 0u64);
    let w = spec.width();
    for &v in values {
        if v < spec.lo {
            under += 1;
        } else if v > spec.hi {
            over += 1;
        } else {
            let k = (((v - spec.lo) / w).floor() as usize).min(spec.bins - 1);
            counts[k] += 1;
        }
    }
    let n = values.len().max(1) as f64;
    HardHistogram {
        fractions: counts.iter().map(|&c| c as f64 / n).collect(),
        underflow: under as f64 / n,
        overflow: over as f64 / n,
    }
}

/// `Σ_b (p_b − q_b)² / (p_b + q_b + ε)`.
pub fn chi2_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| (a - b).powi(2) / (a + b + CHI2_EPS))
        .sum()
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract(
            "KS statistic needs two nonempty samples".into(),
        ));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Asymptotic 95% critical value of the two-sample KS statistic.
pub fn ks_critical_95(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    1.358 * ((n + m) / (n * m)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distances {
    pub chi2: f64,
    pub ks: f64,
}

pub fn distribution_distances(a: &[f64], b: &[f64], spec: &HistogramSpec) -> Result<Distances> {
    let ks = ks_statistic(a, b)?;
    let (p, q) = (hard_histogram(a, spec), hard_histogram(b, spec));
    Ok(Distances {
        chi2: chi2_distance(&p.fractions, &q.fractions),
        ks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub target: Tensor,
    pub transformed: Tensor,
    /// `transformed − target`.
    pub difference: Tensor,
    pub max_abs_offdiag: f64,
    pub mean_abs_offdiag: f64,
}

fn complete_values(t: &EventTable) -> Result<Tensor> {
    let rows = t.complete_rows();
    if rows.len() < 2 {
        return Err(Error::Contract("fewer than 2 rows without padding".into()));
    }
    Ok(t.values().select_rows(&rows))
}

/// Off-diagonal max-abs and mean-abs of a square matrix.
pub fn offdiag_summary(m: &Tensor) -> (f64, f64) {
    let d = m.rows();
    let (mut max, mut sum) = (0.0f64, 0.0);
    for i in 0..d {
        for j in 0..d {
            if i != j {
                max = max.max(m.get(i, j).abs());
                sum += m.get(i, j).abs();
            }
        }
    }
    let k = (d * d.saturating_sub(1)).max(1) as f64;
    (max, sum / k)
}

/// Pearson matrices of both tables on their rows without padding.
pub fn correlation_report(
    target: &EventTable,
    transformed: &EventTable,
) -> Result<CorrelationReport> {
    if target.schema().hash() != transformed.schema().hash() {
        return Err(Error::Schema(
            "correlation report needs matching schemas".into(),
        ));
    }
    let a = pearson_values(&complete_values(target)?)?;
    let b = pearson_values(&complete_values(transformed)?)?;
    let data = b.data().iter().zip(a.data()).map(|(x, y)| x - y).collect();
    let difference = Tensor::new(a.rows(), a.cols(), data)?;
    let (max_abs_offdiag, mean_abs_offdiag) = offdiag_summary(&difference);
    Ok(CorrelationReport {
        target: a,
        transformed: b,
        difference,
        max_abs_offdiag,
        mean_abs_offdiag,
    })
}

/// Twice the Mann–Whitney U of `pos` over `neg` (ties count 1, wins 2).
fn doubled_u(pos: &[f64], neg_sorted: &[f64]) -> u128 {
    pos.iter()
        .map(|&p| {
            let lt = neg_sorted.partition_point(|&n| n < p);
            let le = neg_sorted.partition_point(|&n| n <= p);
            (2 * lt + (le - lt)) as u128
        })
        .sum()
}

/// Probability that a positive scores above a negative, ties counted ½.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Contract("AUC needs both classes".into()));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(Error::Contract("AUC scores contain NaN".into()));
    }
    let mut sorted = neg.to_vec();
    sorted.sort_by(f64::total_cmp);
    let u = doubled_u(pos, &sorted);
    let total = 2 * pos.len() as u128 * neg.len() as u128;
    let other = total - u;
    // The smaller share is divided directly and the larger one is its complement,
    // so swapping the classes yields exactly 1 − auc.
    if u <= other {
        Ok(u as f64 / total as f64)
    } else {
        Ok(1.0 - other as f64 / total as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

/// ROC points for `score ≥ threshold`, anchored at (0,0) and (1,1) by thresholds
/// above and below every score.
pub fn roc_curve(pos: &[f64], neg: &[f64]) -> Result<RocCurve> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Contract("ROC needs both classes".into()));
    }
    let mut p = pos.to_vec();
    let mut n = neg.to_vec();
    p.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let mut th: Vec<f64> = (0..ROC_GRID)
        .map(|k| k as f64 / (ROC_GRID - 1) as f64)
        .collect();
    if p.len() + n.len() <= ROC_EMPIRICAL_MAX {
        th.extend(p.iter().chain(&n).copied());
    }
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let rate =
        |s: &[f64], t: f64| (s.len() - s.partition_point(|&v| v < t)) as f64 / s.len() as f64;
    let top = p[p.len() - 1].max(n[n.len() - 1]).max(1.0) + 1.0;
    let bottom = p[0].min(n[0]).min(0.0) - 1.0;
    let mut curve = RocCurve {
        thresholds: vec![top],
        fpr: vec![0.0],
        tpr: vec![0.0],
    };
    for t in th {
        curve.thresholds.push(t);
        curve.fpr.push(rate(&n, t));
        curve.tpr.push(rate(&p, t));
    }
    curve.thresholds.push(bottom);
    curve.fpr.push(1.0);
    curve.tpr.push(1.0);
    Ok(curve)
}
