//! Rectified MLP backbone with a linear classification head.
//!
//! Inputs, features and logits are batched row-wise (`n x dim`). Every
//! backbone layer, including the last, is followed by a ReLU so features
//! are nonnegative.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};


/// Affine layer `y = x W^T + b` with `weight` stored as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * self.weight.transpose();
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        out
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.outputs())
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Layer widths of a backbone + head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: vec![64, 64],
            feature_dim: 32,
            classes: 8,
        }
    }
}

/// Backbone layers and classifier weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: Vec<Dense>,
    pub head: Dense,
    /// Overall standard deviation of the source inputs; scales augmentation.
    pub input_std: f64,
}

/// Parameter-shaped gradient (or momentum) buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: Vec<Dense>,
    pub head: Dense,
}

/// Which parameters an adapter is allowed to change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    #[default]
    All,
    /// Classifier head plus the last backbone layer.
    HeadAndLastLayer,
    HeadOnly,
}

impl ModelParams {
    /// He-initialised network.
    pub fn init(arch: &Architecture, rng: &mut impl Rng) -> Result<Self> {
        if arch.input_dim == 0 || arch.feature_dim == 0 || arch.classes < 2 {
            return Err(Error::InvalidArgument(format!("degenerate architecture {arch:?}")));
        }
        let mut widths = vec![arch.input_dim];
        widths.extend(&arch.hidden);
        widths.push(arch.feature_dim);
        let layer = |inputs: usize, outputs: usize, rng: &mut dyn rand::RngCore| {
            let std = (2.0 / inputs as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            Dense {
                weight: DMatrix::from_fn(outputs, inputs, |_, _| normal.sample(rng)),
                bias: DVector::zeros(outputs),
            }
        };
        let backbone = widths.windows(2).map(|w| layer(w[0], w[1], rng)).collect();
        let head = {
            let std = (1.0 / arch.feature_dim as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            Dense {
                weight: DMatrix::from_fn(arch.classes, arch.feature_dim, |_, _| normal.sample(rng)),
                bias: DVector::zeros(arch.classes),
            }
        };
        Ok(Self {
            backbone,
            head,
            input_std: 1.0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.backbone[0].inputs()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.inputs()
    }

    pub fn classes(&self) -> usize {
        self.head.outputs()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden: self.backbone[..self.backbone.len() - 1]
                .iter()
                .map(Dense::outputs)
                .collect(),
            feature_dim: self.feature_dim(),
            classes: self.classes(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.backbone.is_empty() {
            return Err(Error::InvalidArgument("backbone has no layers".into()));
        }
        for pair in self.backbone.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::DimensionMismatch {
                    context: "backbone layer chain",
                    expected: pair[0].outputs(),
                    found: pair[1].inputs(),
                });
            }
        }
        let last = self.backbone.last().expect("nonempty").outputs();
        if last != self.head.inputs() {
            return Err(Error::DimensionMismatch {
                context: "classifier input",
                expected: last,
                found: self.head.inputs(),
            });
        }
        for d in self.backbone.iter().chain(std::iter::once(&self.head)) {
            if d.bias.len() != d.outputs() {
                return Err(Error::DimensionMismatch {
                    context: "layer bias",
                    expected: d.outputs(),
                    found: d.bias.len(),
                });
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.backbone.iter().map(Dense::param_count).sum::<usize>() + self.head.param_count()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.backbone.iter().chain(std::iter::once(&self.head))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.backbone.iter_mut().chain(std::iter::once(&mut self.head))
    }

    /// All parameters in a fixed order (layer by layer, weight then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                context: "flat parameters",
                expected: self.param_count(),
                found: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for l in self.layers_mut() {
            l.weight.iter_mut().for_each(|w| *w = it.next().expect("length checked"));
            l.bias.iter_mut().for_each(|b| *b = it.next().expect("length checked"));
        }
        Ok(())
    }

    pub fn predict(&self, inputs: &DMatrix<f64>) -> Result<Vec<usize>> {
        Ok(forward(self, inputs)?.predictions())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&Checkpoint::from(self))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.try_into()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Checkpoint::from(self))?)
    }
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            backbone: params.backbone.iter().map(Dense::zeros_like).collect(),
            head: params.head.zeros_like(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.backbone.iter().chain(std::iter::once(&self.head))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.backbone.iter_mut().chain(std::iter::once(&mut self.head))
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weight += &b.weight * scale;
            a.bias += &b.bias * scale;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in self.layers_mut() {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.layers()
            .map(|l| l.weight.norm_squared() + l.bias.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.layers() {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Zeroes every gradient outside `scope`.
    pub fn restrict(&mut self, scope: TrainScope) {
        let keep_backbone_from = match scope {
            TrainScope::All => 0,
            TrainScope::HeadAndLastLayer => self.backbone.len().saturating_sub(1),
            TrainScope::HeadOnly => self.backbone.len(),
        };
        for l in self.backbone.iter_mut().take(keep_backbone_from) {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub inputs: DMatrix<f64>,
    /// Pre-activation of each backbone layer.
    pub pre: Vec<DMatrix<f64>>,
    /// Post-ReLU activation of each backbone layer; the last one is `z`.
    pub acts: Vec<DMatrix<f64>>,
    pub logits: DMatrix<f64>,
    pub probs: DMatrix<f64>,
}

impl ForwardTrace {
    pub fn features(&self) -> &DMatrix<f64> {
        self.acts.last().expect("backbone has at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs.row_iter().map(|r| argmax(r.iter().copied())).collect()
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// `ln sum_j exp(v_j)`, shifted by the maximum.
pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

pub fn forward(params: &ModelParams, inputs: &DMatrix<f64>) -> Result<ForwardTrace> {
    params.validate()?;
    if inputs.ncols() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "forward input",
            expected: params.input_dim(),
            found: inputs.ncols(),
        });
    }
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forward input".into()));
    }
    let mut pre = Vec::with_capacity(params.backbone.len());
    let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(params.backbone.len());
    for layer in &params.backbone {
        let x = acts.last().unwrap_or(inputs);
        let p = layer.apply(x);
        acts.push(p.map(|v| v.max(0.0)));
        pre.push(p);
    }
    let logits = params.head.apply(acts.last().expect("nonempty backbone"));
    let probs = softmax_rows(&logits);
    Ok(ForwardTrace {
        inputs: inputs.clone(),
        pre,
        acts,
        logits,
        probs,
    })
}

fn check_grad_shape(g: &DMatrix<f64>, rows: usize, cols: usize, context: &'static str) -> Result<()> {
    if g.nrows() != rows {
        return Err(Error::DimensionMismatch {
            context,
            expected: rows,
            found: g.nrows(),
        });
    }
    if g.ncols() != cols {
        return Err(Error::DimensionMismatch {
            context,
            expected: cols,
            found: g.ncols(),
        });
    }
    Ok(())
}

/// Parameter gradients for upstream gradients on the features `z` and/or
/// on the logits. Both contributions are summed at the feature layer.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    grad_features: Option<&DMatrix<f64>>,
    grad_logits: Option<&DMatrix<f64>>,
) -> Result<Gradients> {
    let n = trace.batch_size();
    let mut grads = Gradients::zeros_like(params);
    let z = trace.features();
    let mut dz = DMatrix::zeros(n, params.feature_dim());
    if let Some(gl) = grad_logits {
        check_grad_shape(gl, n, params.classes(), "logit gradient")?;
        grads.head.weight = gl.transpose() * z;
        grads.head.bias = gl.row_sum().transpose();
        dz += gl * &params.head.weight;
    }
    if let Some(gf) = grad_features {
        check_grad_shape(gf, n, params.feature_dim(), "feature gradient")?;
        dz += gf;
    }

    let mut upstream = dz;
    for l in (0..params.backbone.len()).rev() {
        let mut dpre = upstream;
        dpre.zip_apply(&trace.pre[l], |g, p| {
            if p <= 0.0 {
                *g = 0.0
            }
        });
        let below = if l == 0 { &trace.inputs } else { &trace.acts[l - 1] };
        grads.backbone[l].weight = dpre.transpose() * below;
        grads.backbone[l].bias = dpre.row_sum().transpose();
        upstream = if l == 0 {
            DMatrix::zeros(0, 0)
        } else {
            &dpre * &params.backbone[l].weight
        };
    }
    Ok(grads)
}

/// Mean prediction entropy and its gradient with respect to the logits.
pub fn entropy_loss(trace: &ForwardTrace) -> (f64, DMatrix<f64>) {
    let n = trace.batch_size();
    let mut grad = DMatrix::zeros(n, trace.probs.ncols());
    let mut total = 0.0;
    for (i, q) in trace.probs.row_iter().enumerate() {
        let row = trace.logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        let logs: Vec<f64> = row.iter().map(|l| l - lse).collect();
        let h: f64 = -q.iter().zip(&logs).map(|(p, l)| p * l).sum::<f64>();
        total += h;
        // dH/dl_j = -q_j (log q_j + H)
        for (j, (p, l)) in q.iter().zip(&logs).enumerate() {
            grad[(i, j)] = -p * (l + h) / n as f64;
        }
    }
    (total / n as f64, grad)
}

/// Mean of `weight_i * -log q_i[label_i]` and its logit gradient. Samples
/// with weight 0 contribute nothing.
pub fn cross_entropy(
    trace: &ForwardTrace,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<(f64, DMatrix<f64>)> {
    let n = trace.batch_size();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            context: "cross_entropy labels",
            expected: n,
            found: labels.len(),
        });
    }
    let k = trace.probs.ncols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = DMatrix::zeros(n, k);
    let mut total = 0.0;
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let y = labels[i];
        let row = trace.logits.row(i);
        total += w * (log_sum_exp(row.iter().copied()) - row[y]);
        for j in 0..k {
            let target = if j == y { 1.0 } else { 0.0 };
            grad[(i, j)] = w * (trace.probs[(i, j)] - target) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// SGD-with-momentum hyperparameters and velocity buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Gradients,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Gradients::zeros_like(params),
        }
    }
}

/// `v <- m v + g + wd p; p <- p - lr v`. Non-finite gradients are rejected
/// and leave both parameters and buffers untouched.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient (norm {:e}); step rejected",
            grads.norm()
        )));
    }
    let (lr, m, wd) = (state.lr, state.momentum, state.weight_decay);
    for ((p, g), v) in params
        .layers_mut()
        .zip(grads.layers())
        .zip(state.velocity.layers_mut())
    {
        if g.weight.shape() != p.weight.shape() || v.weight.shape() != p.weight.shape() {
            return Err(Error::DimensionMismatch {
                context: "sgd_step",
                expected: p.weight.len(),
                found: g.weight.len(),
            });
        }
        v.weight.zip_zip_apply(&g.weight, &p.weight, |vi, gi, pi| *vi = m * *vi + gi + wd * pi);
        v.bias.zip_zip_apply(&g.bias, &p.bias, |vi, gi, pi| *vi = m * *vi + gi + wd * pi);
        p.weight -= &v.weight * lr;
        p.bias -= &v.bias * lr;
    }
    Ok(())
}

const CHECKPOINT_FORMAT: &str = "ttac-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    input_std: f64,
    backbone: Vec<LayerRecord>,
    head: LayerRecord,
}

impl From<&Dense> for LayerRecord {
    fn from(d: &Dense) -> Self {
        Self {
            inputs: d.inputs(),
            outputs: d.outputs(),
            weight: d.weight.transpose().as_slice().to_vec(),
            bias: d.bias.as_slice().to_vec(),
        }
    }
}

impl TryFrom<LayerRecord> for Dense {
    type Error = Error;

    fn try_from(r: LayerRecord) -> Result<Self> {
        if r.weight.len() != r.inputs * r.outputs || r.bias.len() != r.outputs {
            return Err(Error::Format(format!(
                "layer {}x{} has {} weights and {} biases",
                r.outputs,
                r.inputs,
                r.weight.len(),
                r.bias.len()
            )));
        }
        Ok(Dense {
            weight: DMatrix::from_row_slice(r.outputs, r.inputs, &r.weight),
            bias: DVector::from_vec(r.bias),
        })
    }
}

impl From<&ModelParams> for Checkpoint {
    fn from(p: &ModelParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            input_std: p.input_std,
            backbone: p.backbone.iter().map(LayerRecord::from).collect(),
            head: LayerRecord::from(&p.head),
        }
    }
}

impl TryFrom<Checkpoint> for ModelParams {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint {} v{}, expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}",
                c.format, c.version
            )));
        }
        let params = ModelParams {
            backbone: c
                .backbone
                .into_iter()
                .map(Dense::try_from)
                .collect::<Result<_>>()?,
            head: c.head.try_into()?,
            input_std: c.input_std,
        };
        params.validate()?;
        Ok(params)
    }
}
