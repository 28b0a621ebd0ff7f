//! Source-domain anchors.
//!
//! With labelled source features available the per-class and global
//! Gaussians are plain moment estimates. Without them, class means are
//! inferred from the classifier head alone: each mean is the nonnegative
//! point the head assigns to its own class with the highest confidence,
//! under a weight-decay penalty, and every class gets the isotropic
//! covariance `gamma I`.

use std::fmt;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::network::{log_sum_exp, softmax_rows, Dense, ModelParams};
use crate::stats::{batch_moments, merge_mixture, GaussianStats, MixtureWeights};
use crate::{Error, Result};

/// How a bank's statistics were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Moment estimates from labelled source features.
    Estimated,
    /// Derived from classifier weights only.
    Inferred,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Estimated => "estimated",
            Provenance::Inferred => "inferred",
        })
    }
}

/// Per-class source Gaussians, their moment-matched global Gaussian and the
/// mixture weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceBank {
    pub classes: Vec<GaussianStats>,
    pub global: GaussianStats,
    pub weights: MixtureWeights,
    pub provenance: Provenance,
}

impl SourceBank {
    /// Bank with uniform weights whose global Gaussian is the mixture merge
    /// of `classes`.
    pub fn from_classes(classes: Vec<GaussianStats>, provenance: Provenance) -> Result<Self> {
        let weights = MixtureWeights::uniform(classes.len());
        let global = merge_mixture(&classes, &weights)?;
        Ok(Self {
            classes,
            global,
            weights,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.global.dim()
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.classes.is_empty() {
            return Err(Error::Empty("source bank classes"));
        }
        if self.weights.len() != self.k() {
            return Err(Error::DimensionMismatch {
                context: "source bank weights",
                expected: self.k(),
                found: self.weights.len(),
            });
        }
        for c in &self.classes {
            if c.dim() != d {
                return Err(Error::DimensionMismatch {
                    context: "source bank class dimension",
                    expected: d,
                    found: c.dim(),
                });
            }
        }
        let finite = |g: &GaussianStats| g.mean.iter().chain(g.cov.iter()).all(|v| v.is_finite());
        if !self.classes.iter().all(finite) || !finite(&self.global) {
            return Err(Error::NonFinite("source bank".into()));
        }
        if self.provenance == Provenance::Inferred
            && self.classes.iter().any(|c| c.mean.iter().any(|v| *v < 0.0))
        {
            return Err(Error::InvalidArgument(
                "inferred source means must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&BankFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BankFile = serde_json::from_str(text)?;
        let bank = Self::try_from(file)?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

const BANK_FORMAT: &str = "ttac-source-bank";

#[derive(Serialize, Deserialize)]
struct GaussianRecord {
    mean: Vec<f64>,
    /// Row-major `dim x dim`.
    cov: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    format: String,
    version: u32,
    dim: usize,
    #[serde(rename = "K")]
    k: usize,
    provenance: Provenance,
    weights: Vec<f64>,
    classes: Vec<GaussianRecord>,
    global: GaussianRecord,
}

impl From<&GaussianStats> for GaussianRecord {
    fn from(g: &GaussianStats) -> Self {
        Self {
            mean: g.mean.iter().copied().collect(),
            cov: g.cov.transpose().iter().copied().collect(),
        }
    }
}

impl GaussianRecord {
    fn into_stats(self, dim: usize) -> Result<GaussianStats> {
        if self.mean.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "source bank mean",
                expected: dim,
                found: self.mean.len(),
            });
        }
        if self.cov.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                context: "source bank covariance",
                expected: dim * dim,
                found: self.cov.len(),
            });
        }
        GaussianStats::new(
            DVector::from_vec(self.mean),
            DMatrix::from_row_slice(dim, dim, &self.cov),
        )
    }
}

impl From<&SourceBank> for BankFile {
    fn from(b: &SourceBank) -> Self {
        Self {
            format: BANK_FORMAT.into(),
            version: 1,
            dim: b.dim(),
            k: b.k(),
            provenance: b.provenance,
            weights: b.weights.as_slice().to_vec(),
            classes: b.classes.iter().map(GaussianRecord::from).collect(),
            global: (&b.global).into(),
        }
    }
}

impl TryFrom<BankFile> for SourceBank {
    type Error = Error;

    fn try_from(f: BankFile) -> Result<Self> {
        if f.format != BANK_FORMAT || f.version != 1 {
            return Err(Error::Format(format!("{} v{}", f.format, f.version)));
        }
        if f.classes.len() != f.k {
            return Err(Error::DimensionMismatch {
                context: "source bank classes",
                expected: f.k,
                found: f.classes.len(),
            });
        }
        let classes = f
            .classes
            .into_iter()
            .map(|c| c.into_stats(f.dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes,
            global: f.global.into_stats(f.dim)?,
            weights: MixtureWeights::new(f.weights)?,
            provenance: f.provenance,
        })
    }
}

/// Per-class and global moments of labelled source features
/// (`features_by_class[k]` holds the rows of class `k`).
pub fn estimate_source_stats(features_by_class: &[DMatrix<f64>]) -> Result<SourceBank> {
    if features_by_class.is_empty() {
        return Err(Error::Empty("source features"));
    }
    let d = features_by_class[0].ncols();
    let mut classes = Vec::with_capacity(features_by_class.len());
    for (k, f) in features_by_class.iter().enumerate() {
        if f.nrows() < 2 {
            return Err(Error::TooFewSamples {
                class: k,
                count: f.nrows(),
            });
        }
        if f.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "source class features",
                expected: d,
                found: f.ncols(),
            });
        }
        classes.push(batch_moments(f)?);
    }
    let total: usize = features_by_class.iter().map(|f| f.nrows()).sum();
    let mut all = DMatrix::zeros(total, d);
    let mut row = 0;
    for f in features_by_class {
        all.rows_mut(row, f.nrows()).copy_from(f);
        row += f.nrows();
    }
    Ok(SourceBank {
        global: batch_moments(&all)?,
        weights: MixtureWeights::uniform(classes.len()),
        classes,
        provenance: Provenance::Estimated,
    })
}

/// Rule for the isotropic class covariance of an inferred bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaRule {
    /// Largest eigenvalue of the covariance of the inferred mean set,
    /// divided by `divisor`.
    MeanSpread { divisor: f64 },
    Fixed(f64),
}

impl Default for GammaRule {
    fn default() -> Self {
        GammaRule::MeanSpread { divisor: 30.0 }
    }
}

/// Optimizer and stopping settings for mean inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub lr: f64,
    /// Squared-gradient smoothing.
    pub alpha: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_iterations: usize,
    /// Stop when the objective improves by less than this over `window`.
    pub tolerance: f64,
    pub window: usize,
    pub init_std: f64,
    pub seed: u64,
    pub gamma: GammaRule,
    /// Used when the mean set is degenerate.
    pub gamma_floor: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            alpha: 0.99,
            eps: 1e-8,
            weight_decay: 1e-3,
            max_iterations: 5000,
            tolerance: 1e-7,
            window: 100,
            init_std: 0.1,
            seed: 0,
            gamma: GammaRule::default(),
            gamma_floor: 1e-3,
        }
    }
}

/// Optimizer state: unconstrained parameters, one row per class, and the
/// squared-gradient averages.
#[derive(Debug, Clone, PartialEq)]
pub struct InferState {
    pub raw: DMatrix<f64>,
    pub sq_avg: DMatrix<f64>,
    pub lr: f64,
    pub weight_decay: f64,
    pub iteration: usize,
}

impl InferState {
    pub fn new(k: usize, d: usize, cfg: &InferConfig) -> Result<Self> {
        let normal = Normal::new(0.0, cfg.init_std)
            .map_err(|e| Error::InvalidArgument(format!("init_std: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            raw: DMatrix::from_fn(k, d, |_, _| normal.sample(&mut rng).abs()),
            sq_avg: DMatrix::zeros(k, d),
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            iteration: 0,
        })
    }

    /// Class means, one per row; elementwise squares of the parameters.
    pub fn means(&self) -> DMatrix<f64> {
        self.raw.map(|v| v * v)
    }
}

/// `sum_k -log softmax_k(W mu_k + b)` with per-class terms.
fn class_losses(head: &Dense, means: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let mut logits = means * head.weight.transpose();
    for mut row in logits.row_iter_mut() {
        row += head.bias.transpose();
    }
    let probs = softmax_rows(&logits);
    let losses = (0..probs.nrows())
        .map(|k| log_sum_exp(logits.row(k).iter().copied()) - logits[(k, k)])
        .collect();
    (losses, probs)
}

/// Objective (without the weight-decay penalty) and its gradient on the
/// unconstrained parameters.
pub fn inference_objective(head: &Dense, raw: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let means = raw.map(|v| v * v);
    let (losses, mut probs) = class_losses(head, &means);
    for k in 0..probs.nrows() {
        probs[(k, k)] -= 1.0;
    }
    let d_means = probs * &head.weight;
    let grad = d_means.component_mul(&raw.map(|v| 2.0 * v));
    (losses.iter().sum(), grad)
}

/// One RMSprop step with L2 weight decay folded into the gradient.
fn rmsprop_step(state: &mut InferState, grad: &DMatrix<f64>, cfg: &InferConfig) {
    let InferState {
        raw,
        sq_avg,
        lr,
        weight_decay,
        ..
    } = state;
    for ((p, s), g) in raw.iter_mut().zip(sq_avg.iter_mut()).zip(grad.iter()) {
        let g = g + *weight_decay * *p;
        *s = cfg.alpha * *s + (1.0 - cfg.alpha) * g * g;
        *p -= *lr * g / (s.sqrt() + cfg.eps);
    }
    state.iteration += 1;
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutcome {
    /// One row per class, elementwise nonnegative.
    pub means: DMatrix<f64>,
    /// `argmax_j (W mu_k + b)_j == k` per class.
    pub self_consistent: Vec<bool>,
    pub converged: bool,
    pub class_loss: Vec<f64>,
    /// Objective value before each step and after the last one.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// Infer one nonnegative mean per class from the classifier head.
pub fn infer_source_means(head: &Dense, cfg: &InferConfig) -> Result<InferOutcome> {
    if head.weight.iter().chain(head.bias.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("classifier weights".into()));
    }
    if cfg.window == 0 {
        return Err(Error::InvalidArgument("inference window must be positive".into()));
    }
    let (k, d) = (head.outputs(), head.inputs());
    let mut state = InferState::new(k, d, cfg)?;
    let mut trace = Vec::with_capacity(cfg.max_iterations + 1);
    for _ in 0..cfg.max_iterations {
        let (value, grad) = inference_objective(head, &state.raw);
        trace.push(value);
        let n = trace.len();
        if n > cfg.window && trace[n - 1 - cfg.window] - value < cfg.tolerance {
            break;
        }
        rmsprop_step(&mut state, &grad, cfg);
    }
    let means = state.means();
    let (class_loss, probs) = class_losses(head, &means);
    if trace.len() == state.iteration {
        trace.push(class_loss.iter().sum());
    }
    let self_consistent: Vec<bool> = probs
        .row_iter()
        .enumerate()
        .map(|(c, q)| crate::network::argmax(q.iter().copied()) == c)
        .collect();
    let converged = state.iteration > 0 && self_consistent.iter().all(|&b| b);
    if !converged {
        warn!(
            "source mean inference not self-consistent after {} iterations; class losses {:?}",
            state.iteration, class_loss
        );
    }
    Ok(InferOutcome {
        means,
        self_consistent,
        converged,
        class_loss,
        objective_trace: trace,
        iterations: state.iteration,
    })
}

/// Largest eigenvalue of the population covariance of the mean set (rows),
/// divided by `divisor`.
pub fn choose_gamma(means: &DMatrix<f64>, divisor: f64) -> Result<f64> {
    if means.nrows() < 2 {
        return Err(Error::InvalidArgument("choose_gamma needs at least two means".into()));
    }
    if divisor <= 0.0 {
        return Err(Error::InvalidArgument("gamma divisor must be positive".into()));
    }
    let spread = batch_moments(means)?;
    let top = spread.cov.symmetric_eigenvalues().max();
    let scale = means.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if top.is_nan() || top <= 1e-12 * scale * scale {
        return Err(Error::DegenerateMeans);
    }
    Ok(top / divisor)
}

/// Inferred bank: class Gaussians `N(mu_k, gamma I)`, uniform weights.
pub fn build_inferred_bank(means: &DMatrix<f64>, gamma: f64) -> Result<SourceBank> {
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    if means.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument("inferred means must be finite and nonnegative".into()));
    }
    let d = means.ncols();
    let classes = means
        .row_iter()
        .map(|m| GaussianStats::new(m.transpose(), DMatrix::identity(d, d) * gamma))
        .collect::<Result<Vec<_>>>()?;
    SourceBank::from_classes(classes, Provenance::Inferred)
}

fn resolve_gamma(means: &DMatrix<f64>, cfg: &InferConfig) -> Result<f64> {
    match cfg.gamma {
        GammaRule::Fixed(g) => Ok(g),
        GammaRule::MeanSpread { divisor } => match choose_gamma(means, divisor) {
            Err(Error::DegenerateMeans) => {
                warn!("degenerate inferred means; using gamma floor {}", cfg.gamma_floor);
                Ok(cfg.gamma_floor)
            }
            other => other,
        },
    }
}

/// Full source-free pipeline on a model's head.
pub fn infer_source_bank(params: &ModelParams, cfg: &InferConfig) -> Result<(SourceBank, InferOutcome)> {
    let outcome = infer_source_means(&params.head, cfg)?;
    let gamma = resolve_gamma(&outcome.means, cfg)?;
    Ok((build_inferred_bank(&outcome.means, gamma)?, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn head(weight: DMatrix<f64>) -> Dense {
        let k = weight.nrows();
        Dense {
            weight,
            bias: DVector::zeros(k),
        }
    }

    #[test]
    fn disjoint_clouds_give_centroids() {
        let a = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[10.0, 10.0, 12.0, 10.0]);
        let bank = estimate_source_stats(&[a, b]).unwrap();
        assert_relative_eq!(bank.classes[0].mean, DVector::from_vec(vec![1.0 / 3.0, 1.0 / 3.0]), epsilon = 1e-12);
        assert_relative_eq!(bank.classes[1].mean, DVector::from_vec(vec![11.0, 10.0]), epsilon = 1e-12);
        assert_eq!(bank.provenance, Provenance::Estimated);
    }

    #[test]
    fn too_few_samples_names_class() {
        let a = DMatrix::from_element(3, 2, 1.0);
        let b = DMatrix::from_element(1, 2, 1.0);
        match estimate_source_stats(&[a, b]) {
            Err(Error::TooFewSamples { class: 1, count: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn equal_sized_classes_global_is_mixture_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feats: Vec<DMatrix<f64>> = (0..4)
            .map(|k| DMatrix::from_fn(25, 3, |_, j| rng.random::<f64>() + (k * j) as f64))
            .collect();
        let bank = estimate_source_stats(&feats).unwrap();
        let merged = merge_mixture(&bank.classes, &bank.weights).unwrap();
        assert!((merged.mean - &bank.global.mean).amax() < 1e-9);
        assert!((merged.cov - &bank.global.cov).amax() < 1e-9);
    }

    #[test]
    fn global_matches_pooled_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let feats: Vec<DMatrix<f64>> = [5, 9, 14]
            .iter()
            .map(|&n| DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>()))
            .collect();
        let bank = estimate_source_stats(&feats).unwrap();
        let mut pooled = Vec::new();
        for f in &feats {
            for r in f.row_iter() {
                pooled.extend(r.iter().copied());
            }
        }
        let all = DMatrix::from_row_slice(28, 2, &pooled);
        let oracle = batch_moments(&all).unwrap();
        assert!((oracle.mean - &bank.global.mean).amax() < 1e-12);
        assert!((oracle.cov - &bank.global.cov).amax() < 1e-12);
    }

    #[test]
    fn diagonal_classifier_is_self_consistent() {
        let out = infer_source_means(&head(DMatrix::identity(2, 2) * 2.0), &InferConfig::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.self_consistent, vec![true, true]);
        assert!(out.means.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn zero_iterations_is_initialisation() {
        let cfg = InferConfig { max_iterations: 0, seed: 3, ..Default::default() };
        let w = DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.5, -0.5, 1.0, 0.2]);
        let out = infer_source_means(&head(w), &cfg).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.means, InferState::new(2, 3, &cfg).unwrap().means());
    }

    #[test]
    fn positive_scaling_keeps_consistency_pattern() {
        let w = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, -0.3, 0.1, 0.9, 0.0, -0.2, 0.3, 1.1]);
        let means = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.0, 0.7, 0.2, 0.1, 0.0, 0.9]);
        let (_, p1) = class_losses(&head(w.clone()), &means);
        let (_, p2) = class_losses(&head(w * 3.5), &means);
        for k in 0..3 {
            let a = crate::network::argmax(p1.row(k).iter().copied());
            let b = crate::network::argmax(p2.row(k).iter().copied());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (k, d) = (rng.random_range(2..6), rng.random_range(1..10));
            let h = Dense {
                weight: DMatrix::from_fn(k, d, |_, _| rng.random::<f64>() * 2.0 - 1.0),
                bias: DVector::from_fn(k, |_, _| rng.random::<f64>() - 0.5),
            };
            let raw = DMatrix::from_fn(k, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let (_, g) = inference_objective(&h, &raw);
            let eps = 1e-6;
            for i in 0..raw.len() {
                let mut p = raw.clone();
                p[i] += eps;
                let mut m = raw.clone();
                m[i] -= eps;
                let fd = (inference_objective(&h, &p).0 - inference_objective(&h, &m).0) / (2.0 * eps);
                assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()).max(1e-6), "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn objective_non_increasing_over_trailing_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = DMatrix::from_fn(4, 6, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let out = infer_source_means(&head(w), &InferConfig::default()).unwrap();
        let t = &out.objective_trace;
        for i in 50..t.len() {
            assert!(t[i] <= t[i - 50] + 1e-9, "iteration {i}: {} > {}", t[i], t[i - 50]);
        }
    }

    #[test]
    fn gamma_hand_computed() {
        let means = DMatrix::from_column_slice(2, 1, &[0.0, 2.0]);
        assert_relative_eq!(choose_gamma(&means, 30.0).unwrap(), 1.0 / 30.0, epsilon = 1e-15);
        let same = DMatrix::from_element(3, 2, 0.4);
        assert!(matches!(choose_gamma(&same, 30.0), Err(Error::DegenerateMeans)));
    }

    #[test]
    fn degenerate_means_fall_back_to_floor() {
        let same = DMatrix::from_element(3, 2, 0.4);
        let cfg = InferConfig::default();
        assert_eq!(resolve_gamma(&same, &cfg).unwrap(), cfg.gamma_floor);
    }

    proptest! {
        #[test]
        fn gamma_scales_quadratically(vals in proptest::collection::vec(0.0f64..5.0, 6), c in 0.1f64..10.0) {
            let means = DMatrix::from_row_slice(3, 2, &vals);
            if let Ok(g) = choose_gamma(&means, 30.0) {
                let scaled = choose_gamma(&(&means * c), 30.0).unwrap();
                prop_assert!((scaled - c * c * g).abs() <= 1e-9 * scaled.max(1e-12));
            }
        }
    }

    #[test]
    fn inferred_bank_examples() {
        let m = DMatrix::from_element(3, 2, 0.7);
        let bank = build_inferred_bank(&m, 0.5).unwrap();
        assert_relative_eq!(bank.global.mean, DVector::from_element(2, 0.7), epsilon = 1e-15);
        assert_relative_eq!(bank.global.cov, DMatrix::identity(2, 2) * 0.5, epsilon = 1e-15);

        let m = DMatrix::from_column_slice(2, 1, &[0.0, 2.0]);
        let bank = build_inferred_bank(&m, 1.0).unwrap();
        assert_relative_eq!(bank.global.mean[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(bank.global.cov[(0, 0)], 2.0, epsilon = 1e-15);
        assert!(bank.global.cov.symmetric_eigenvalues().min() >= 0.0);

        assert!(build_inferred_bank(&m, 0.0).is_err());
        assert!(build_inferred_bank(&(-m), 1.0).is_err());
    }

    #[test]
    fn bank_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats: Vec<DMatrix<f64>> = (0..3)
            .map(|_| DMatrix::from_fn(6, 3, |_, _| rng.random::<f64>()))
            .collect();
        let bank = estimate_source_stats(&feats).unwrap();
        let back = SourceBank::from_json(&bank.to_json().unwrap()).unwrap();
        assert_eq!(back.provenance, bank.provenance);
        for (a, b) in back.classes.iter().zip(&bank.classes) {
            assert!((&a.cov - &b.cov).amax() < 1e-15);
            assert!((&a.mean - &b.mean).amax() < 1e-15);
        }
        let text = bank.to_json().unwrap().replace("\"K\": 3", "\"K\": 4");
        assert!(SourceBank::from_json(&text).is_err());
    }
}
