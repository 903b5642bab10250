//! Bounded residual transformations `x' = x + m·α·tanh(f(x))·z`.
//!
//! Every model can be evaluated on a [`Tape`] with its parameters as
//! trainable leaves, or on plain tensors in row chunks for inference.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::valid_mask;
use crate::par;

pub use io::{
    load_model, save_model, ModelBundle, ModelKind, TrainedModel, MODEL_FORMAT, MODEL_VERSION,
};

/// Rows per chunk for inference-mode transformations.
pub const TRANSFORM_CHUNK: usize = 4096;

/// Fully connected network with tanh hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    sizes: Vec<usize>,
    /// Per layer: weights (fan_in × fan_out) then bias (1 × fan_out).
    layers: Vec<(Tensor, Tensor)>,
}

/// Glorot-uniform weights and zero biases.
pub fn init_mlp(sizes: &[usize], seed: u64) -> Result<MlpParams> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = sizes
        .windows(2)
        .map(|w| {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let data = (0..w[0] * w[1])
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            (
                Tensor::new(w[0], w[1], data).expect("sized"),
                Tensor::zeros(1, w[1]),
            )
        })
        .collect();
    Ok(MlpParams {
        sizes: sizes.to_vec(),
        layers,
    })
}

impl MlpParams {
    pub fn from_layers(layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let mut sizes = vec![layers[0].0.rows()];
        for (w, b) in &layers {
            if w.rows() != *sizes.last().expect("nonempty") || b.shape() != [1, w.cols()] {
                return Err(Error::Dimension("layer shapes do not chain".into()));
            }
            if !w.all_finite() || !b.all_finite() {
                return Err(Error::Contract("non-finite network parameter".into()));
            }
            sizes.push(w.cols());
        }
        Ok(Self { sizes, layers })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("nonempty")
    }

    pub fn layers(&self) -> &[(Tensor, Tensor)] {
        &self.layers
    }

    /// Sets the output layer to zero so the residual starts at the identity.
    pub fn zero_output_layer(mut self) -> Self {
        let (w, b) = self.layers.last_mut().expect("nonempty");
        w.data_mut().fill(0.0);
        b.data_mut().fill(0.0);
        self
    }

    /// Records all parameters as trainable leaves, in layer order.
    pub fn vars(&self, tape: &mut Tape) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .map(|t| tape.var(t))
            .collect()
    }

    /// Network output for `x` using parameter leaves from [`MlpParams::vars`].
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        if vars.len() != 2 * self.layers.len() {
            return Err(Error::Contract(
                "parameter handle count does not match the network".into(),
            ));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, pair) in vars.chunks(2).enumerate() {
            let z = tape.matmul(h, pair[0])?;
            let z = tape.add_row(z, pair[1])?;
            h = if l == last { z } else { tape.tanh(z) };
        }
        Ok(h)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }
}

/// Access to the trainable tensors of a model, in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
}

impl Parameters for MlpParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }
}

fn check_width(x: &Tensor, d: usize) -> Result<()> {
    if x.cols() != d {
        return Err(Error::Dimension(format!(
            "model expects {d} features, input has {}",
            x.cols()
        )));
    }
    Ok(())
}

/// Runs `f` on row chunks of `x` and concatenates the row-major results.
fn chunked<F>(x: &Tensor, out_cols: usize, f: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync + Send,
{
    let parts = par::map_ranges(x.rows(), TRANSFORM_CHUNK, |r| {
        let idx: Vec<usize> = r.collect();
        f(&x.select_rows(&idx))
    });
    let mut data = Vec::with_capacity(x.rows() * out_cols);
    for p in parts {
        data.extend_from_slice(p?.data());
    }
    Tensor::new(x.rows(), out_cols, data)
}

/// Correction applied to all features at once by one network (d → d).
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalResidualModel {
    pub mlp: MlpParams,
    pub alpha: Vec<f64>,
    pub mask: Vec<bool>,
    pub zero_protect: Vec<bool>,
}

impl GlobalResidualModel {
    /// New model with `hidden` layers and a zero output layer.
    pub fn new(
        alpha: Vec<f64>,
        mask: Vec<bool>,
        zero_protect: Vec<bool>,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let d = alpha.len();
        let mut sizes = vec![d];
        sizes.extend_from_slice(hidden);
        sizes.push(d);
        let mlp = init_mlp(&sizes, seed)?.zero_output_layer();
        Self::from_parts(mlp, alpha, mask, zero_protect)
    }

    pub fn from_parts(
        mlp: MlpParams,
        alpha: Vec<f64>,
        mask: Vec<bool>,
        zero_protect: Vec<bool>,
    ) -> Result<Self> {
        let d = alpha.len();
        if mlp.input_dim() != d
            || mlp.output_dim() != d
            || mask.len() != d
            || zero_protect.len() != d
        {
            return Err(Error::Dimension(format!(
                "global model needs d → d with d = {d}"
            )));
        }
        if alpha.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config(
                "correction budgets α must be finite and ≥ 0".into(),
            ));
        }
        Ok(Self {
            mlp,
            alpha,
            mask,
            zero_protect,
        })
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    fn budgets(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.mask)
            .map(|(a, &m)| if m { *a } else { 0.0 })
            .collect()
    }

    /// `x'` on the tape; `vars` from `self.mlp.vars`.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        check_width(tape.value(x), self.dim())?;
        let gate = valid_mask(tape.value(x), &self.zero_protect);
        let f = self.mlp.forward(tape, vars, x)?;
        let t = tape.tanh(f);
        let scaled = tape.scale_columns(t, &self.budgets())?;
        let g = tape.constant(gate);
        let delta = tape.mul(scaled, g)?;
        tape.add(x, delta)
    }

    /// Inference-mode transformation of standardized events.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_width(x, self.dim())?;
        chunked(x, self.dim(), |c| {
            let mut tape = Tape::new();
            let vars = self.mlp.vars(&mut tape);
            let v = tape.constant(c.clone());
            let out = self.forward_tape(&mut tape, &vars, v)?;
            Ok(tape.value(out).clone())
        })
    }
}

impl Parameters for GlobalResidualModel {
    fn tensors(&self) -> Vec<&Tensor> {
        self.mlp.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.tensors_mut()
    }
}

/// Correction of a single feature from a context subset of the input (|I_j| → 1).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureResidualModel {
    pub feature: usize,
    pub context: Vec<usize>,
    pub mlp: MlpParams,
    pub alpha: f64,
    pub zero_protect: bool,
}

impl FeatureResidualModel {
    pub fn new(
        feature: usize,
        context: Vec<usize>,
        alpha: f64,
        zero_protect: bool,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let mut sizes = vec![context.len()];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mlp = init_mlp(&sizes, seed)?.zero_output_layer();
        Self::from_parts(feature, context, mlp, alpha, zero_protect)
    }

    pub fn from_parts(
        feature: usize,
        context: Vec<usize>,
        mlp: MlpParams,
        alpha: f64,
        zero_protect: bool,
    ) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::Config(format!(
                "feature {feature}: context set is empty"
            )));
        }
        if mlp.input_dim() != context.len() || mlp.output_dim() != 1 {
            return Err(Error::Dimension(format!(
                "feature {feature}: network must map |I_j| → 1"
            )));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Config(
                "correction budget α must be finite and ≥ 0".into(),
            ));
        }
        Ok(Self {
            feature,
            context,
            mlp,
            alpha,
            zero_protect,
        })
    }

    fn check_indices(&self, d: usize) -> Result<()> {
        if self.feature >= d || self.context.iter().any(|&c| c >= d) {
            return Err(Error::Dimension(format!(
                "feature {} with context {:?} does not fit {d} input columns",
                self.feature, self.context
            )));
        }
        Ok(())
    }

    /// Transformed column `x'_j` (N×1) on the tape.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        self.check_indices(tape.value(x).cols())?;
        let xj = tape.column(x, self.feature)?;
        let ctx = tape.select_columns(x, &self.context)?;
        let f = self.mlp.forward(tape, vars, ctx)?;
        let t = tape.tanh(f);
        let mut delta = tape.scale(t, self.alpha);
        if self.zero_protect {
            let gate = valid_mask(tape.value(xj), &[true]);
            let g = tape.constant(gate);
            delta = tape.mul(delta, g)?;
        }
        tape.add(xj, delta)
    }

    /// Inference-mode `x'_j` for all rows of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_indices(x.cols())?;
        let out = chunked(x, 1, |c| {
            let mut tape = Tape::new();
            let vars = self.mlp.vars(&mut tape);
            let v = tape.constant(c.clone());
            let out = self.forward_tape(&mut tape, &vars, v)?;
            Ok(tape.value(out).clone())
        })?;
        Ok(out.into_data())
    }
}

impl Parameters for FeatureResidualModel {
    fn tensors(&self) -> Vec<&Tensor> {
        self.mlp.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.tensors_mut()
    }
}

/// Default stage-1 context: the feature plus every feature of the same object.
pub fn default_context(j: usize, groups: &[Vec<usize>]) -> Vec<usize> {
    let mut ctx = vec![j];
    for g in groups.iter().filter(|g| g.contains(&j)) {
        ctx.extend(g.iter().copied().filter(|&k| k != j));
    }
    ctx.sort_unstable();
    ctx.dedup();
    ctx
}

/// Per-feature stage followed by a global refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoStepModel {
    /// `None` leaves the feature unchanged in stage 1.
    pub stage1: Vec<Option<FeatureResidualModel>>,
    pub stage2: GlobalResidualModel,
}

impl TwoStepModel {
    pub fn new(
        stage1: Vec<Option<FeatureResidualModel>>,
        stage2: GlobalResidualModel,
    ) -> Result<Self> {
        if stage1.len() != stage2.dim() {
            return Err(Error::Dimension(
                "stage 1 and stage 2 disagree on the feature count".into(),
            ));
        }
        for (j, m) in stage1.iter().enumerate() {
            if let Some(m) = m {
                if m.feature != j {
                    return Err(Error::Config(format!(
                        "stage-1 slot {j} holds the model of feature {}",
                        m.feature
                    )));
                }
                m.check_indices(stage1.len())?;
            }
        }
        Ok(Self { stage1, stage2 })
    }

    pub fn dim(&self) -> usize {
        self.stage1.len()
    }

    /// Stage 1 on the tape. Every feature reads the untransformed `x`.
    /// `vars[j]` holds the parameter leaves of stage-1 model `j` (empty for `None`).
    pub fn stage1_tape(&self, tape: &mut Tape, vars: &[Vec<Var>], x: Var) -> Result<Var> {
        check_width(tape.value(x), self.dim())?;
        let cols = self
            .stage1
            .iter()
            .enumerate()
            .map(|(j, m)| match m {
                Some(m) => m.forward_tape(tape, &vars[j], x),
                None => tape.column(x, j),
            })
            .collect::<Result<Vec<_>>>()?;
        tape.stack_columns(&cols)
    }

    /// Stage 1 only, inference mode.
    pub fn forward_stage1(&self, x: &Tensor) -> Result<Tensor> {
        check_width(x, self.dim())?;
        chunked(x, self.dim(), |c| {
            let mut tape = Tape::new();
            let vars: Vec<Vec<Var>> = self
                .stage1
                .iter()
                .map(|m| m.as_ref().map_or_else(Vec::new, |m| m.mlp.vars(&mut tape)))
                .collect();
            let v = tape.constant(c.clone());
            let out = self.stage1_tape(&mut tape, &vars, v)?;
            Ok(tape.value(out).clone())
        })
    }

    /// `(x', x'')`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let x1 = self.forward_stage1(x)?;
        let x2 = self.stage2.forward(&x1)?;
        Ok((x1, x2))
    }
}
