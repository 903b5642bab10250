use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    correlation_report, distribution_distances, hard_histogram, transfer_roc_test, ClassifierSpec,
    CorrelationReport, Distances, HardHistogram, RocCurve, TransferResult,
};
use crate::autodiff::Tensor;
use crate::dataset::EventTable;
use crate::error::{Error, Result};
use crate::losses::{HistogramDefaults, HistogramSpec};
use crate::observables::ResolvedObservable;
use crate::par;
use crate::util::fmt_g17;

pub const REPORT_FORMAT: &str = "rescorr-eval-report";
/// JSON Schema describing [`EvalReport`] documents.
pub const REPORT_SCHEMA: &str = include_str!("../../schemas/eval_report.schema.json");

/// Everything [`evaluate`] compares.
#[derive(Clone, Debug)]
pub struct EvalInputs<'a> {
    pub target: &'a EventTable,
    pub transformed: &'a EventTable,
    /// Enables the source panels and, with `classifier`, the transfer test.
    pub source: Option<&'a EventTable>,
    pub observables: &'a [ResolvedObservable],
    /// Per-feature histogram in physical units; empty or `None` entries use the defaults.
    pub feature_histograms: &'a [Option<HistogramSpec>],
    pub histogram_defaults: HistogramDefaults,
    pub classifier: Option<&'a ClassifierSpec>,
    pub config: serde_json::Value,
}

/// One histogram panel: a feature or a derived observable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub name: String,
    pub spec: HistogramSpec,
    pub target: HardHistogram,
    pub transformed: HardHistogram,
    pub source: Option<HardHistogram>,
    pub transformed_vs_target: Distances,
    pub source_vs_target: Option<Distances>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub target: u64,
    pub transformed: u64,
    pub source: Option<u64>,
    pub classifier: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub features: Vec<Panel>,
    pub observables: Vec<Panel>,
    pub correlation: CorrelationReport,
    pub transfer: Option<TransferResult>,
    pub config: serde_json::Value,
    pub seeds: Seeds,
}

fn panel(
    name: &str,
    spec: HistogramSpec,
    target: &[f64],
    transformed: &[f64],
    source: Option<&[f64]>,
) -> Result<Panel> {
    Ok(Panel {
        name: name.to_string(),
        spec,
        target: hard_histogram(target, &spec),
        transformed: hard_histogram(transformed, &spec),
        source: source.map(|s| hard_histogram(s, &spec)),
        transformed_vs_target: distribution_distances(transformed, target, &spec)?,
        source_vs_target: source
            .map(|s| distribution_distances(s, target, &spec))
            .transpose()?,
    })
}

/// Builds the full closure report.
pub fn evaluate(inputs: &EvalInputs<'_>) -> Result<EvalReport> {
    let schema = inputs.target.schema();
    let d = schema.len();
    for t in [Some(inputs.transformed), inputs.source]
        .into_iter()
        .flatten()
    {
        if t.schema().hash() != schema.hash() {
            return Err(Error::Schema(
                "evaluation inputs have different schemas".into(),
            ));
        }
    }
    if !inputs.feature_histograms.is_empty() && inputs.feature_histograms.len() != d {
        return Err(Error::Config(format!(
            "expected {d} feature histogram entries"
        )));
    }
    let features = par::map_indices(d, |j| {
        let t = inputs.target.column_valid(j);
        let spec = match inputs.feature_histograms.get(j).copied().flatten() {
            Some(s) => s,
            None => inputs.histogram_defaults.spec_for(&t, &[])?,
        };
        let s = inputs.source.map(|s| s.column_valid(j));
        panel(
            &schema.feature(j).name,
            spec,
            &t,
            &inputs.transformed.column_valid(j),
            s.as_deref(),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let observables = par::map_indices(inputs.observables.len(), |k| {
        let o = &inputs.observables[k];
        let t = o.values(inputs.target)?;
        let spec = match o.histogram {
            Some(s) => s,
            None => inputs.histogram_defaults.spec_for(&t, &[])?,
        };
        let s = inputs.source.map(|s| o.values(s)).transpose()?;
        panel(
            &o.name,
            spec,
            &t,
            &o.values(inputs.transformed)?,
            s.as_deref(),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let correlation = correlation_report(inputs.target, inputs.transformed)?;
    let transfer = match (inputs.source, inputs.classifier) {
        (Some(src), Some(spec)) => Some(transfer_roc_test(
            src,
            inputs.target,
            inputs.transformed,
            spec,
        )?),
        _ => None,
    };
    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        version: 1,
        features,
        observables,
        correlation,
        transfer,
        config: inputs.config.clone(),
        seeds: Seeds {
            target: inputs.target.seed(),
            transformed: inputs.transformed.seed(),
            source: inputs.source.map(EventTable::seed),
            classifier: inputs
                .classifier
                .filter(|_| inputs.source.is_some())
                .map(|c| c.seed),
        },
    })
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn hist_csv(p: &Panel) -> String {
    let mut s = String::from("lo,hi,target,transformed,source\n");
    let edges = p.spec.edges();
    for b in 0..p.spec.bins {
        let src = p
            .source
            .as_ref()
            .map_or(String::new(), |h| fmt_g17(h.fractions[b]));
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            fmt_g17(edges[b]),
            fmt_g17(edges[b + 1]),
            fmt_g17(p.target.fractions[b]),
            fmt_g17(p.transformed.fractions[b]),
            src
        );
    }
    s
}

fn matrix_csv(m: &Tensor, names: &[String]) -> String {
    let mut s = format!(",{}\n", names.join(","));
    for (i, n) in names.iter().enumerate() {
        let row: Vec<String> = (0..m.cols()).map(|j| fmt_g17(m.get(i, j))).collect();
        let _ = writeln!(s, "{n},{}", row.join(","));
    }
    s
}

fn roc_csv(r: &RocCurve) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for k in 0..r.fpr.len() {
        let _ = writeln!(
            s,
            "{},{},{}",
            fmt_g17(r.thresholds[k]),
            fmt_g17(r.fpr[k]),
            fmt_g17(r.tpr[k])
        );
    }
    s
}

impl EvalReport {
    /// Writes one CSV file per plot panel into `dir`; returns the paths.
    pub fn write_panels(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files: Vec<(String, String)> = Vec::new();
        for p in &self.features {
            files.push((
                format!("hist_feature_{}.csv", file_stem(&p.name)),
                hist_csv(p),
            ));
        }
        for p in &self.observables {
            files.push((
                format!("hist_observable_{}.csv", file_stem(&p.name)),
                hist_csv(p),
            ));
        }
        let names: Vec<String> = self.features.iter().map(|p| p.name.clone()).collect();
        files.push((
            "corr_target.csv".into(),
            matrix_csv(&self.correlation.target, &names),
        ));
        files.push((
            "corr_transformed.csv".into(),
            matrix_csv(&self.correlation.transformed, &names),
        ));
        files.push((
            "corr_difference.csv".into(),
            matrix_csv(&self.correlation.difference, &names),
        ));
        if let Some(t) = &self.transfer {
            files.push(("roc_target.csv".into(), roc_csv(&t.roc_target)));
            files.push(("roc_transformed.csv".into(), roc_csv(&t.roc_transformed)));
        }
        let mut out = Vec::with_capacity(files.len());
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            out.push(path);
        }
        Ok(out)
    }
}
