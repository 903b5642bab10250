//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation eagerly: values are computed when the
//! operation is appended, and [`Tape::backward`] walks the record in reverse
//! to accumulate gradients. Tapes are single-use; build a fresh one per
//! minibatch.
//!
//! Binary operations accept equal shapes or a 1×1 operand on either side.
//! Row-vector broadcasting is only available through the explicit
//! [`Tape::add_row`] and [`Tape::scale_columns`] operations.

pub mod kernels;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use kernels::SoftBins;

/// Dense row-major matrix of `f64`. Scalars are 1×1, columns are N×1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr")]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct TensorRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = Error;

    fn try_from(r: TensorRepr) -> Result<Self> {
        Tensor::new(r.rows, r.cols, r.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Dimension(format!(
                "shape {rows}×{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn column(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// The single value of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn column_values(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transposed(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Gathers the given rows into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(&self.data[i * self.cols..(i + 1) * self.cols]);
        }
        Tensor {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    Sqrt(Var),
    Cos(Var),
    Sin(Var),
    Cosh(Var),
    Wrap(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    AddRow(Var, Var),
    ScaleColumns(Var, Vec<f64>),
    Transpose(Var),
    SelectColumns(Var, Vec<usize>),
    StackColumns(Vec<Var>),
    Diag(Var),
    SoftHistogram {
        x: Var,
        weights: Option<Vec<f64>>,
        bins: SoftBins,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` is unreachable.
    pub fn get(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[v.0][0] * self.shapes[v.0][1]],
        }
    }

    /// Moves the gradient buffer out (zeros when unreachable).
    pub fn take(&mut self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.shapes[v.0][0] * self.shapes[v.0][1]])
    }
}

fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || a.is_scalar() || b.is_scalar()
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, cols) = if a.is_scalar() && !b.is_scalar() {
        (b.rows, b.cols)
    } else {
        (a.rows, a.cols)
    };
    let n = rows * cols;
    let data = if a.shape() == b.shape() {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    } else if a.is_scalar() {
        let x = a.data[0];
        b.data.iter().map(|&y| f(x, y)).collect()
    } else {
        let y = b.data[0];
        a.data.iter().map(|&x| f(x, y)).collect()
    };
    debug_assert_eq!(n, rows * cols);
    Tensor { rows, cols, data }
}

/// Reduces an output-shaped gradient to an operand that may have been broadcast.
fn reduce_to(operand: &Tensor, g: Vec<f64>) -> Vec<f64> {
    if operand.len() == g.len() {
        g
    } else {
        vec![g.iter().sum()]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let value = Tensor {
            rows: src.rows,
            cols: src.cols,
            data: src.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    /// Trainable leaf.
    pub fn var(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols != tb.rows {
            return Err(Error::Dimension(format!(
                "matmul {}×{} · {}×{}",
                ta.rows, ta.cols, tb.rows, tb.cols
            )));
        }
        let data = kernels::matmul(&ta.data, ta.rows, ta.cols, &tb.data, tb.cols);
        let value = Tensor {
            rows: ta.rows,
            cols: tb.cols,
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !broadcast_ok(ta, tb) {
            return Err(Error::Dimension(format!(
                "{name}: {}×{} vs {}×{}",
                ta.rows, ta.cols, tb.rows, tb.cols
            )));
        }
        let value = zip_broadcast(ta, tb, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `sqrt(max(x, 0))` with zero gradient where the input is not positive.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| if x > 0.0 { x.sqrt() } else { 0.0 })
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cosh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cosh(a), f64::cosh)
    }

    /// Wraps angles into (-π, π]; unit gradient.
    pub fn wrap_angle(&mut self, a: Var) -> Var {
        self.unary(a, Op::Wrap(a), crate::util::wrap_angle)
    }

    /// `max(x, c)` with zero gradient where clamped.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::ClampMin(a, c), |x| x.max(c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data.iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Column means as a 1×C row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let mut m = vec![0.0; t.cols];
        for r in 0..t.rows {
            for (c, acc) in m.iter_mut().enumerate() {
                *acc += t.data[r * t.cols + c];
            }
        }
        let n = t.rows.max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        let rg = self.rg(a);
        self.push(Tensor::row(m), Op::MeanRows(a), rg)
    }

    /// Adds a 1×C row to every row of an N×C matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if tr.rows != 1 || tr.cols != ta.cols {
            return Err(Error::Dimension(format!(
                "add_row: {}×{} + {}×{}",
                ta.rows, ta.cols, tr.rows, tr.cols
            )));
        }
        let mut data = ta.data.clone();
        for chunk in data.chunks_mut(ta.cols.max(1)) {
            for (v, b) in chunk.iter_mut().zip(&tr.data) {
                *v += b;
            }
        }
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Multiplies column `c` by the constant `factors[c]`.
    pub fn scale_columns(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if factors.len() != ta.cols {
            return Err(Error::Dimension(format!(
                "scale_columns: {} factors for {} columns",
                factors.len(),
                ta.cols
            )));
        }
        let mut data = ta.data.clone();
        for chunk in data.chunks_mut(ta.cols.max(1)) {
            for (v, f) in chunk.iter_mut().zip(factors) {
                *v *= f;
            }
        }
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::ScaleColumns(a, factors.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.transposed();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn column(&mut self, a: Var, c: usize) -> Result<Var> {
        self.select_columns(a, &[c])
    }

    pub fn select_columns(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if let Some(&bad) = cols.iter().find(|&&c| c >= ta.cols) {
            return Err(Error::Dimension(format!(
                "column {bad} out of range for {} columns",
                ta.cols
            )));
        }
        let mut data = Vec::with_capacity(ta.rows * cols.len());
        for r in 0..ta.rows {
            for &c in cols {
                data.push(ta.data[r * ta.cols + c]);
            }
        }
        let value = Tensor {
            rows: ta.rows,
            cols: cols.len(),
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::SelectColumns(a, cols.to_vec()), rg))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn stack_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(p) => self.nodes[p.0].value.rows,
            None => return Err(Error::Dimension("stack_columns of nothing".into())),
        };
        if parts.iter().any(|p| self.nodes[p.0].value.rows != rows) {
            return Err(Error::Dimension("stack_columns: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let t = &self.nodes[p.0].value;
                data.extend_from_slice(&t.data[r * t.cols..(r + 1) * t.cols]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor { rows, cols, data },
            Op::StackColumns(parts.to_vec()),
            rg,
        ))
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rows != ta.cols {
            return Err(Error::Dimension(format!("diag of {}×{}", ta.rows, ta.cols)));
        }
        let d = (0..ta.rows).map(|i| ta.data[i * ta.cols + i]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::column(d), Op::Diag(a), rg))
    }

    /// Sigmoid-edged histogram of an N×1 column: returns a B×1 column of
    /// fractions normalized by the weight sum (or N when unweighted).
    pub fn soft_histogram(
        &mut self,
        x: Var,
        weights: Option<Vec<f64>>,
        bins: SoftBins,
    ) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.cols != 1 {
            return Err(Error::Dimension(format!(
                "soft_histogram needs a column, got {}×{}",
                tx.rows, tx.cols
            )));
        }
        if let Some(w) = &weights {
            if w.len() != tx.rows {
                return Err(Error::Dimension("soft_histogram weight count".into()));
            }
        }
        if !(bins.temperature > 0.0) || !(bins.width > 0.0) || bins.bins == 0 {
            return Err(Error::Contract(
                "soft_histogram needs τ > 0 and a positive bin width".into(),
            ));
        }
        let fr = kernels::soft_hist_forward(&tx.data, weights.as_deref(), &bins);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::column(fr),
            Op::SoftHistogram { x, weights, bins },
            rg,
        ))
    }

    /// Mean binary cross-entropy of logits against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        if tl.len() != labels.len() {
            return Err(Error::Dimension("bce: label count".into()));
        }
        let n = labels.len().max(1) as f64;
        let loss = tl
            .data
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss. The tape cannot be replayed afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State(
                "tape already consumed by a backward pass".into(),
            ));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            let [r, c] = self.nodes[loss.0].value.shape();
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {r}×{c}"
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                op => self.propagate(op, &node.value, g, &mut grads),
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.rg(*a) {
                    let ga = kernels::matmul_nt(&g, ta.rows, tb.cols, &tb.data, tb.rows);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = kernels::matmul_tn(&ta.data, ta.rows, ta.cols, &g, tb.cols);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    let ga = reduce_to(self.val(*a), g.clone());
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = reduce_to(self.val(*b), g.iter().map(|v| sign * v).collect());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.rg(*a) {
                    let full = zip_broadcast(
                        &Tensor {
                            rows: out.rows,
                            cols: out.cols,
                            data: g.clone(),
                        },
                        tb,
                        |gv, y| gv * y,
                    );
                    self.accumulate(grads, *a, reduce_to(ta, full.data));
                }
                if self.rg(*b) {
                    let full = zip_broadcast(
                        &Tensor {
                            rows: out.rows,
                            cols: out.cols,
                            data: g.clone(),
                        },
                        ta,
                        |gv, x| gv * x,
                    );
                    self.accumulate(grads, *b, reduce_to(tb, full.data));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let gt = Tensor {
                    rows: out.rows,
                    cols: out.cols,
                    data: g,
                };
                if self.rg(*a) {
                    let full = zip_broadcast(&gt, tb, |gv, y| gv / y);
                    self.accumulate(grads, *a, reduce_to(ta, full.data));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -out/b
                    let q = zip_broadcast(out, tb, |o, y| -o / y);
                    let full = zip_broadcast(&gt, &q, |gv, v| gv * v);
                    self.accumulate(grads, *b, reduce_to(tb, full.data));
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::Tanh(a) => {
                let d = out
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(y, gv)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = out
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(y, gv)| gv * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let x = self.val(*a);
                let d = x.data.iter().zip(&g).map(|(x, gv)| 2.0 * x * gv).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let d = out
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(y, gv)| if *y > 0.0 { gv * 0.5 / y } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Cos(a) => {
                let x = self.val(*a);
                let d = x.data.iter().zip(&g).map(|(x, gv)| -gv * x.sin()).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sin(a) => {
                let x = self.val(*a);
                let d = x.data.iter().zip(&g).map(|(x, gv)| gv * x.cos()).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Cosh(a) => {
                let x = self.val(*a);
                let d = x.data.iter().zip(&g).map(|(x, gv)| gv * x.sinh()).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Wrap(a) => self.accumulate(grads, *a, g),
            Op::ClampMin(a, c) => {
                let x = self.val(*a);
                let d = x
                    .data
                    .iter()
                    .zip(&g)
                    .map(|(x, gv)| if x > c { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.val(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.val(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::MeanRows(a) => {
                let t = self.val(*a);
                let inv = 1.0 / t.rows.max(1) as f64;
                let mut d = Vec::with_capacity(t.len());
                for _ in 0..t.rows {
                    d.extend(g.iter().map(|v| v * inv));
                }
                self.accumulate(grads, *a, d);
            }
            Op::AddRow(a, row) => {
                if self.rg(*row) {
                    let cols = out.cols;
                    let mut gr = vec![0.0; cols];
                    for chunk in g.chunks(cols.max(1)) {
                        for (acc, v) in gr.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
                self.accumulate(grads, *a, g);
            }
            Op::ScaleColumns(a, f) => {
                let mut d = g;
                for chunk in d.chunks_mut(f.len().max(1)) {
                    for (v, s) in chunk.iter_mut().zip(f) {
                        *v *= s;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Transpose(a) => {
                let gt = Tensor {
                    rows: out.rows,
                    cols: out.cols,
                    data: g,
                }
                .transposed();
                self.accumulate(grads, *a, gt.data);
            }
            Op::SelectColumns(a, cols) => {
                let t = self.val(*a);
                let mut d = vec![0.0; t.len()];
                for r in 0..t.rows {
                    for (k, &c) in cols.iter().enumerate() {
                        d[r * t.cols + c] += g[r * cols.len() + k];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::StackColumns(parts) => {
                let mut offset = 0;
                for p in parts {
                    let t = self.val(*p);
                    if self.rg(*p) {
                        let mut d = Vec::with_capacity(t.len());
                        for r in 0..t.rows {
                            let start = r * out.cols + offset;
                            d.extend_from_slice(&g[start..start + t.cols]);
                        }
                        self.accumulate(grads, *p, d);
                    }
                    offset += t.cols;
                }
            }
            Op::Diag(a) => {
                let t = self.val(*a);
                let mut d = vec![0.0; t.len()];
                for (i, v) in g.iter().enumerate() {
                    d[i * t.cols + i] = *v;
                }
                self.accumulate(grads, *a, d);
            }
            Op::SoftHistogram { x, weights, bins } => {
                let tx = self.val(*x);
                let d = kernels::soft_hist_backward(&tx.data, weights.as_deref(), bins, &g);
                self.accumulate(grads, *x, d);
            }
            Op::BceWithLogits { logits, labels } => {
                let tl = self.val(*logits);
                let n = labels.len().max(1) as f64;
                let d = tl
                    .data
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| g[0] * (kernels::sigmoid(z) - y) / n)
                    .collect();
                self.accumulate(grads, *logits, d);
            }
        }
    }
}
