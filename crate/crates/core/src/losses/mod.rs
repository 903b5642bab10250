//! Differentiable loss terms: soft-histogram matching for features and derived
//! observables, the movement penalty and the correlation penalty.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, SoftBins, Tape, Tensor, Var};
use crate::dataset::Standardizer;
use crate::error::{Error, Result};
use crate::observables::ResolvedObservable;
use crate::util::percentile_sorted;

/// Regularizer in the denominator of the histogram loss.
pub const HIST_EPS: f64 = 1e-4;
/// Floor applied to standard deviations and correction budgets.
pub const SCALE_EPS: f64 = 1e-8;

/// Uniform binning on `[lo, hi]` with a sigmoid temperature in bin widths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    pub temperature: f64,
}

impl HistogramSpec {
    pub fn new(lo: f64, hi: f64, bins: usize, temperature: f64) -> Result<Self> {
        let s = Self {
            lo,
            hi,
            bins,
            temperature,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Config(format!(
                "histogram range [{}, {}] is empty",
                self.lo, self.hi
            )));
        }
        if self.bins < 2 {
            return Err(Error::Config("histogram needs at least 2 bins".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(
                "histogram temperature must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.bins)
            .map(|k| self.lo + k as f64 * self.width())
            .collect()
    }

    pub fn soft_bins(&self) -> SoftBins {
        SoftBins {
            lo: self.lo,
            width: self.width(),
            bins: self.bins,
            temperature: self.temperature,
        }
    }
}

/// How histogram ranges are chosen when a spec is not given explicitly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramDefaults {
    pub bins: usize,
    pub temperature: f64,
    pub lo_percentile: f64,
    pub hi_percentile: f64,
}

impl Default for HistogramDefaults {
    fn default() -> Self {
        Self {
            bins: 40,
            temperature: 0.1,
            lo_percentile: 0.1,
            hi_percentile: 99.9,
        }
    }
}

impl HistogramDefaults {
    /// Range from percentiles of the pooled samples.
    pub fn spec_for(&self, a: &[f64], b: &[f64]) -> Result<HistogramSpec> {
        let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        if pooled.is_empty() {
            return Err(Error::Config(
                "cannot derive a histogram range from no values".into(),
            ));
        }
        pooled.sort_by(f64::total_cmp);
        let mut lo = percentile_sorted(&pooled, self.lo_percentile);
        let mut hi = percentile_sorted(&pooled, self.hi_percentile);
        if !(hi > lo) {
            lo -= 0.5;
            hi += 0.5;
        }
        HistogramSpec::new(lo, hi, self.bins, self.temperature)
    }
}

/// Normalized soft-histogram fractions of the target sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetTemplate {
    pub spec: HistogramSpec,
    pub fractions: Vec<f64>,
}

impl TargetTemplate {
    pub fn from_values(values: &[f64], spec: HistogramSpec) -> Result<Self> {
        spec.validate()?;
        let mut fractions = kernels::soft_hist_forward(values, None, &spec.soft_bins());
        let total: f64 = fractions.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config(
                "target sample has no mass inside the histogram range".into(),
            ));
        }
        fractions.iter_mut().for_each(|f| *f /= total);
        Ok(Self { spec, fractions })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub hist: f64,
    pub der: f64,
    #[serde(rename = "move")]
    pub movement: f64,
    pub corr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            hist: 1.0,
            der: 1.0,
            movement: 0.01,
            corr: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hist", self.hist),
            ("der", self.der),
            ("move", self.movement),
            ("corr", self.corr),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "loss weight λ_{name} must be a finite value ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_hist")]
    pub hist: f64,
    #[serde(rename = "L_der")]
    pub der: f64,
    #[serde(rename = "L_move")]
    pub movement: f64,
    #[serde(rename = "L_corr")]
    pub corr: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.hist, self.der, self.movement, self.corr, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn soft_histogram(
    tape: &mut Tape,
    x: Var,
    weights: Option<Vec<f64>>,
    spec: &HistogramSpec,
) -> Result<Var> {
    spec.validate()?;
    tape.soft_histogram(x, weights, spec.soft_bins())
}

/// `Σ_b (p_b − q_b)² / (q_b + ε)` for soft fractions `p` (B×1).
pub fn hist_loss_from_fractions(tape: &mut Tape, p: Var, template: &TargetTemplate) -> Result<Var> {
    let q = tape.constant(Tensor::column(template.fractions.clone()));
    let inv = tape.constant(Tensor::column(
        template
            .fractions
            .iter()
            .map(|q| 1.0 / (q + HIST_EPS))
            .collect(),
    ));
    let d = tape.sub(p, q)?;
    let sq = tape.square(d);
    let w = tape.mul(sq, inv)?;
    Ok(tape.sum(w))
}

/// Histogram loss of a column against its template. `weights` drops entries (0) from the histogram.
pub fn hist_loss(
    tape: &mut Tape,
    x_col: Var,
    weights: Option<Vec<f64>>,
    template: &TargetTemplate,
) -> Result<Var> {
    let p = soft_histogram(tape, x_col, weights, &template.spec)?;
    hist_loss_from_fractions(tape, p, template)
}

/// Sum of histogram losses over derived observables evaluated on physical values.
pub fn derived_loss(
    tape: &mut Tape,
    phys: Var,
    observables: &[(ResolvedObservable, TargetTemplate)],
) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (obs, template) in observables {
        let col = obs.evaluate(tape, phys)?;
        let l = hist_loss(tape, col, None, template)?;
        total = tape.add(total, l)?;
    }
    Ok(total)
}

/// `(1/N)·Σ_i Σ_j w_j·((x'_ij − x_ij)/max(α_j, ε))²` over entries with `valid == 1`.
pub fn movement_loss(
    tape: &mut Tape,
    x: Var,
    x_prime: Var,
    weights: &[f64],
    alpha: &[f64],
    valid: &Tensor,
) -> Result<Var> {
    let n = tape.value(x).rows().max(1) as f64;
    let d = tape.sub(x_prime, x)?;
    let factors: Vec<f64> = weights
        .iter()
        .zip(alpha)
        .map(|(w, a)| w.sqrt() / a.max(SCALE_EPS))
        .collect();
    let scaled = tape.scale_columns(d, &factors)?;
    let sq = tape.square(scaled);
    let mask = tape.constant(valid.clone());
    let kept = tape.mul(sq, mask)?;
    let s = tape.sum(kept);
    Ok(tape.scale(s, 1.0 / n))
}

fn off_diagonal_mask(d: usize) -> Tensor {
    let data = (0..d * d)
        .map(|k| if k / d == k % d { 0.0 } else { 1.0 })
        .collect();
    Tensor::new(d, d, data).expect("square")
}

fn identity(d: usize) -> Tensor {
    let data = (0..d * d)
        .map(|k| if k / d == k % d { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(d, d, data).expect("square")
}

/// Pearson correlation matrix of the columns of an N×d matrix. The diagonal is exactly 1.
pub fn pearson_matrix(tape: &mut Tape, x: Var) -> Result<Var> {
    let [n, d] = tape.value(x).shape();
    if n < 2 {
        return Err(Error::Contract(format!(
            "pearson_matrix needs N ≥ 2, got {n}"
        )));
    }
    let mean = tape.mean_rows(x);
    let neg = tape.scale(mean, -1.0);
    let xc = tape.add_row(x, neg)?;
    let xct = tape.transpose(xc);
    let cov = tape.matmul(xct, xc)?;
    let cov = tape.scale(cov, 1.0 / n as f64);
    let var = tape.diag(cov)?;
    let sd = tape.sqrt(var);
    let sd = tape.clamp_min(sd, SCALE_EPS);
    let sdt = tape.transpose(sd);
    let denom = tape.matmul(sd, sdt)?;
    let rho = tape.div(cov, denom)?;
    let off = tape.constant(off_diagonal_mask(d));
    let rho_off = tape.mul(rho, off)?;
    let eye = tape.constant(identity(d));
    tape.add(rho_off, eye)
}

/// Pearson matrix of plain values.
pub fn pearson_values(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let r = pearson_matrix(&mut tape, v)?;
    Ok(tape.value(r).clone())
}

/// Squared Frobenius distance between `ρ(x')` and `reference`, diagonal excluded.
pub fn corr_loss(tape: &mut Tape, x_prime: Var, reference: &Tensor) -> Result<Var> {
    let d = tape.value(x_prime).cols();
    if reference.shape() != [d, d] {
        return Err(Error::Dimension(format!(
            "reference correlation is {:?}, expected {d}×{d}",
            reference.shape()
        )));
    }
    for i in 0..d {
        if (reference.get(i, i) - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(
                "reference correlation needs a unit diagonal".into(),
            ));
        }
        for j in 0..i {
            if (reference.get(i, j) - reference.get(j, i)).abs() > 1e-9 {
                return Err(Error::Contract(
                    "reference correlation must be symmetric".into(),
                ));
            }
        }
    }
    let rho = pearson_matrix(tape, x_prime)?;
    let r = tape.constant(reference.clone());
    let diff = tape.sub(rho, r)?;
    let sq = tape.square(diff);
    let off = tape.constant(off_diagonal_mask(d));
    let kept = tape.mul(sq, off)?;
    Ok(tape.sum(kept))
}

/// Maps standardized values to physical units on the tape; padded entries become 0.
pub fn to_physical(
    tape: &mut Tape,
    x: Var,
    standardizer: &Standardizer,
    valid: &Tensor,
) -> Result<Var> {
    let d = tape.value(x).cols();
    if d != standardizer.len() {
        return Err(Error::Dimension(
            "standardizer/feature count mismatch".into(),
        ));
    }
    let mut cols = Vec::with_capacity(d);
    for j in 0..d {
        let c = tape.column(x, j)?;
        let p = if standardizer.azimuth()[j] {
            tape.wrap_angle(c)
        } else {
            let s = tape.scale(c, standardizer.scales()[j]);
            tape.add_scalar(s, standardizer.means()[j])
        };
        cols.push(p);
    }
    let phys = tape.stack_columns(&cols)?;
    let mask = tape.constant(valid.clone());
    tape.mul(phys, mask)
}

/// 1 for regular entries, 0 for padding sentinels of protected features.
pub fn valid_mask(x: &Tensor, protect: &[bool]) -> Tensor {
    let d = x.cols();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| if protect[k % d] && v == 0.0 { 0.0 } else { 1.0 })
        .collect();
    Tensor::new(x.rows(), d, data).expect("same shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// All four terms; correlation reference is the untransformed batch.
    Global,
    /// Refinement stage: no feature histograms; correlation reference is the target.
    Stage2,
}

/// Everything the composite loss needs besides the batch itself.
#[derive(Clone, Debug)]
pub struct LossContext {
    /// Per feature; `None` for features excluded from the histogram term.
    pub feature_templates: Vec<Option<TargetTemplate>>,
    pub observables: Vec<(ResolvedObservable, TargetTemplate)>,
    pub standardizer: Standardizer,
    pub weights: LossWeights,
    pub move_weights: Vec<f64>,
    pub move_alpha: Vec<f64>,
    pub protect: Vec<bool>,
    /// Correlation reference used in [`LossMode::Stage2`].
    pub target_correlation: Option<Tensor>,
}

/// Weighted sum of the loss terms for one batch, plus the per-term values.
///
/// `x_in` is the batch before the transformation being trained and `x_out`
/// after it; both standardized.
pub fn composite_loss(
    tape: &mut Tape,
    ctx: &LossContext,
    mode: LossMode,
    x_in: Var,
    x_out: Var,
) -> Result<(Var, LossBreakdown)> {
    ctx.weights.validate()?;
    let valid = valid_mask(tape.value(x_in), &ctx.protect);
    let zero = tape.constant(Tensor::scalar(0.0));
    let mut total = zero;
    let mut br = LossBreakdown::default();

    if mode == LossMode::Global {
        let mut h = zero;
        for (j, tpl) in ctx.feature_templates.iter().enumerate() {
            let Some(tpl) = tpl else { continue };
            let col = tape.column(x_out, j)?;
            let w = ctx.protect[j].then(|| valid.column_values(j));
            let l = hist_loss(tape, col, w, tpl)?;
            h = tape.add(h, l)?;
        }
        br.hist = tape.value(h).item();
        let t = tape.scale(h, ctx.weights.hist);
        total = tape.add(total, t)?;
    }

    if !ctx.observables.is_empty() {
        let phys = to_physical(tape, x_out, &ctx.standardizer, &valid)?;
        let l = derived_loss(tape, phys, &ctx.observables)?;
        br.der = tape.value(l).item();
        let t = tape.scale(l, ctx.weights.der);
        total = tape.add(total, t)?;
    }

    let m = movement_loss(
        tape,
        x_in,
        x_out,
        &ctx.move_weights,
        &ctx.move_alpha,
        &valid,
    )?;
    br.movement = tape.value(m).item();
    let t = tape.scale(m, ctx.weights.movement);
    total = tape.add(total, t)?;

    let reference = match mode {
        LossMode::Global => pearson_values(tape.value(x_in))?,
        LossMode::Stage2 => ctx.target_correlation.clone().ok_or_else(|| {
            Error::Config("stage-2 loss needs the target correlation matrix".into())
        })?,
    };
    let c = corr_loss(tape, x_out, &reference)?;
    br.corr = tape.value(c).item();
    let t = tape.scale(c, ctx.weights.corr);
    total = tape.add(total, t)?;

    br.total = tape.value(total).item();
    Ok((total, br))
}
