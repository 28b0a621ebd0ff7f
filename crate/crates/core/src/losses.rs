//! Adaptation objectives: anchored clustering, global feature alignment and
//! confidence-gated self-training.
//!
//! Alignment gradients reach the batch features only through the
//! current batch's additive terms in the running update; the statistics
//! accumulated before the batch are constants.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::filters::{accepted_rows, select_rows, FilterDecision};
use crate::network::{backward, cross_entropy, forward, ForwardTrace, Gradients, ModelParams};
use crate::source::SourceBank;
use crate::stats::{
    gaussian_kl_grad, running_update, running_update_backward, CovRegularizer, GaussianStats,
    MixtureWeights, RunningStats,
};
use crate::{Error, Result};

/// Target-domain running statistics: one per class plus the global one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBank {
    pub clusters: Vec<RunningStats>,
    pub global: RunningStats,
    pub weights: MixtureWeights,
}

/// How target statistics are initialised at stream start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetInit {
    /// Start from the source anchors, carrying `clip` pseudo-samples.
    #[default]
    SourceAnchors,
    /// Zero mean, zero covariance, zero count.
    Empty,
}

impl TargetBank {
    pub fn new(source: &SourceBank, n_clip: u64, n_clip_k: u64, init: TargetInit) -> Self {
        let d = source.dim();
        let (clusters, global) = match init {
            TargetInit::SourceAnchors => (
                source
                    .classes
                    .iter()
                    .map(|c| RunningStats::warm(c, n_clip_k, Some(n_clip_k)))
                    .collect(),
                RunningStats::warm(&source.global, n_clip, Some(n_clip)),
            ),
            TargetInit::Empty => (
                (0..source.k())
                    .map(|_| RunningStats::empty(d, Some(n_clip_k)))
                    .collect(),
                RunningStats::empty(d, Some(n_clip)),
            ),
        };
        Self {
            clusters,
            global,
            weights: MixtureWeights::uniform(source.k()),
        }
    }

    /// Warm start carrying `count` pseudo-samples (capped at each clip)
    /// instead of a full clip's worth.
    pub fn warm(source: &SourceBank, n_clip: u64, n_clip_k: u64, count: u64) -> Self {
        Self {
            clusters: source
                .classes
                .iter()
                .map(|c| RunningStats::warm(c, count.min(n_clip_k), Some(n_clip_k)))
                .collect(),
            global: RunningStats::warm(&source.global, count.min(n_clip), Some(n_clip)),
            weights: MixtureWeights::uniform(source.k()),
        }
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }
}

/// Which statistics carry gradient back to the features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatGradient {
    #[default]
    MeanAndCov,
    MeanOnly,
}

/// Divergence used by the global alignment term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalAlignment {
    #[default]
    Kl,
    /// `||mu_t - mu_s||^2 + ||Sigma_t - Sigma_s||_F^2`.
    MomentL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignmentOptions {
    pub regularizer: CovRegularizer,
    pub stat_gradient: StatGradient,
    pub global: GlobalAlignment,
}

/// Value of an alignment loss and its gradient on the batch features.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTerm {
    pub value: f64,
    pub feature_grad: DMatrix<f64>,
    /// Samples that entered the statistics.
    pub samples: usize,
}

enum Divergence {
    Kl,
    MomentL2,
}

/// Divergence from `anchor` to the statistics obtained by folding `batch`
/// into `prior`, with the gradient on the batch rows.
fn align_one(
    anchor: &GaussianStats,
    prior: &RunningStats,
    batch: Option<&DMatrix<f64>>,
    opts: &AlignmentOptions,
    divergence: Divergence,
) -> Result<(f64, Option<DMatrix<f64>>)> {
    let (updated, trace) = match batch {
        Some(b) => {
            let (u, t) = running_update(prior, b)?;
            (u, Some(t))
        }
        None => (prior.clone(), None),
    };
    let (value, g_mean, g_cov) = match divergence {
        Divergence::Kl => {
            let p = anchor.regularized(&opts.regularizer)?;
            let q = updated.gaussian().regularized(&opts.regularizer)?;
            let kl = gaussian_kl_grad(&p, &q)?;
            let g_cov = opts.regularizer.backward(&updated.cov, &kl.d_cov_q);
            (kl.value, kl.d_mean_q, g_cov)
        }
        Divergence::MomentL2 => {
            let dm = &updated.mean - &anchor.mean;
            let dc = &updated.cov - &anchor.cov;
            (dm.norm_squared() + dc.norm_squared(), dm * 2.0, dc * 2.0)
        }
    };
    let grad = match (batch, trace) {
        (Some(b), Some(t)) => {
            let g_cov = match opts.stat_gradient {
                StatGradient::MeanAndCov => Some(&g_cov),
                StatGradient::MeanOnly => None,
            };
            Some(running_update_backward(&t, b, &g_mean, g_cov))
        }
        _ => None,
    };
    Ok((value, grad))
}

fn check_features(source: &SourceBank, features: &DMatrix<f64>) -> Result<()> {
    if features.ncols() != source.dim() {
        return Err(Error::DimensionMismatch {
            context: "alignment features",
            expected: source.dim(),
            found: features.ncols(),
        });
    }
    Ok(())
}

/// `sum_k KL(N(mu_sk, Sigma_sk) || N(mu_tk, Sigma_tk))` where each target
/// cluster is first updated with the batch samples pseudo-labelled `k` that
/// passed both filters.
pub fn anchored_clustering_loss(
    source: &SourceBank,
    target: &TargetBank,
    features: &DMatrix<f64>,
    decisions: &[FilterDecision],
    opts: &AlignmentOptions,
) -> Result<AlignmentTerm> {
    check_features(source, features)?;
    if source.k() != target.k() {
        return Err(Error::DimensionMismatch {
            context: "anchored clustering classes",
            expected: source.k(),
            found: target.k(),
        });
    }
    if decisions.len() != features.nrows() {
        return Err(Error::DimensionMismatch {
            context: "anchored clustering decisions",
            expected: features.nrows(),
            found: decisions.len(),
        });
    }
    let rows = accepted_rows(decisions, source.k());
    let mut value = 0.0;
    let mut feature_grad = DMatrix::zeros(features.nrows(), features.ncols());
    let mut samples = 0;
    for ((anchor, cluster), idx) in source.classes.iter().zip(&target.clusters).zip(&rows) {
        let batch = (!idx.is_empty()).then(|| select_rows(features, idx));
        let (v, g) = align_one(anchor, cluster, batch.as_ref(), opts, Divergence::Kl)?;
        value += v;
        if let Some(g) = g {
            for (r, &i) in idx.iter().enumerate() {
                feature_grad.set_row(i, &g.row(r));
            }
            samples += idx.len();
        }
    }
    Ok(AlignmentTerm {
        value,
        feature_grad,
        samples,
    })
}

/// Divergence between the source global Gaussian and the target global
/// statistics updated with every batch sample (no filtering).
pub fn global_alignment_loss(
    source_global: &GaussianStats,
    target_global: &RunningStats,
    features: &DMatrix<f64>,
    opts: &AlignmentOptions,
) -> Result<AlignmentTerm> {
    if features.ncols() != source_global.dim() {
        return Err(Error::DimensionMismatch {
            context: "global alignment features",
            expected: source_global.dim(),
            found: features.ncols(),
        });
    }
    let divergence = match opts.global {
        GlobalAlignment::Kl => Divergence::Kl,
        GlobalAlignment::MomentL2 => Divergence::MomentL2,
    };
    let batch = (features.nrows() > 0).then_some(features);
    let (value, grad) = align_one(source_global, target_global, batch, opts, divergence)?;
    Ok(AlignmentTerm {
        value,
        feature_grad: grad.unwrap_or_else(|| DMatrix::zeros(0, features.ncols())),
        samples: features.nrows(),
    })
}

/// Input perturbations for the weak and strong views.
///
/// Weak: `x + N(0, weak_sigma^2 I)`. Strong: coordinate dropout with
/// probability `drop_prob`, then `+ N(0, strong_sigma^2 I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub drop_prob: f64,
}

impl AugmentationConfig {
    /// Default magnitudes relative to the source input standard deviation.
    pub fn relative_to(input_std: f64) -> Self {
        Self {
            weak_sigma: 0.05 * input_std,
            strong_sigma: 0.15 * input_std,
            drop_prob: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.weak_sigma >= 0.0
            && self.strong_sigma >= self.weak_sigma
            && (0.0..1.0).contains(&self.drop_prob);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "augmentation needs 0 <= weak <= strong and drop in [0, 1): {self:?}"
            )));
        }
        Ok(())
    }
}

/// Weak and strong views of a batch.
pub fn augment(
    inputs: &DMatrix<f64>,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut weak = inputs.clone();
    if cfg.weak_sigma > 0.0 {
        for v in weak.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += cfg.weak_sigma * e;
        }
    }
    let mut strong = inputs.clone();
    for v in strong.iter_mut() {
        if cfg.drop_prob > 0.0 && rng.random_bool(cfg.drop_prob) {
            *v = 0.0;
        }
        if cfg.strong_sigma > 0.0 {
            let e: f64 = StandardNormal.sample(rng);
            *v += cfg.strong_sigma * e;
        }
    }
    (weak, strong)
}

/// Gated cross-entropy of the strong view against the weak-view pseudo label.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfTrainingTerm {
    pub value: f64,
    /// Gradient on the strong-view logits.
    pub grad_logits: DMatrix<f64>,
    pub accepted: usize,
}

/// Self-training term from weak-view decisions (label + confidence gate) and
/// the strong-view forward pass. Averaged over the whole batch.
pub fn self_training_term(
    decisions: &[FilterDecision],
    strong: &ForwardTrace,
) -> Result<SelfTrainingTerm> {
    let labels: Vec<usize> = decisions.iter().map(|d| d.label).collect();
    let gate: Vec<f64> = decisions
        .iter()
        .map(|d| if d.st_pass { 1.0 } else { 0.0 })
        .collect();
    let (value, grad_logits) = cross_entropy(strong, &labels, Some(&gate))?;
    Ok(SelfTrainingTerm {
        value,
        grad_logits,
        accepted: decisions.iter().filter(|d| d.st_pass).count(),
    })
}

/// Stand-alone self-training loss: draws both views, labels and gates with
/// the weak view, and returns the term and its parameter gradients (which
/// flow through the strong branch only).
pub fn self_training_loss(
    params: &ModelParams,
    inputs: &DMatrix<f64>,
    aug: &AugmentationConfig,
    tau_st: f64,
    rng: &mut impl Rng,
) -> Result<(SelfTrainingTerm, Gradients)> {
    aug.validate()?;
    let (weak, strong) = augment(inputs, aug, rng);
    let weak_trace = forward(params, &weak)?;
    let decisions: Vec<FilterDecision> = weak_trace
        .probs
        .row_iter()
        .enumerate()
        .map(|(i, q)| {
            let label = crate::network::argmax(q.iter().copied());
            FilterDecision {
                id: i as u64,
                label,
                tc_pass: true,
                pp_pass: true,
                st_pass: q[label] >= tau_st,
            }
        })
        .collect();
    let strong_trace = forward(params, &strong)?;
    let term = self_training_term(&decisions, &strong_trace)?;
    let grads = backward(params, &strong_trace, None, Some(&term.grad_logits))?;
    Ok((term, grads))
}

/// Per-step loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ac: f64,
    pub l_ga: f64,
    pub l_st: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
    pub n_ac: usize,
    pub n_ga: usize,
    pub n_st: usize,
}

impl LossBreakdown {
    pub fn recomputed_total(&self) -> f64 {
        self.l_ac + self.lambda1 * self.l_ga + self.lambda2 * self.l_st
    }
}

/// Which terms enter the objective and with what weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub anchored: bool,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            anchored: true,
            lambda1: 1.0,
            lambda2: 10.0,
        }
    }
}

pub struct ObjectiveInputs<'a> {
    pub params: &'a ModelParams,
    /// Source anchors and current target statistics; `None` disables both
    /// alignment terms.
    pub alignment: Option<(&'a SourceBank, &'a TargetBank)>,
    /// Weak view: drives statistics, filters and pseudo labels.
    pub weak: &'a ForwardTrace,
    /// Strong view: required when `lambda2 != 0`.
    pub strong: Option<&'a ForwardTrace>,
    pub decisions: &'a [FilterDecision],
    pub weights: ObjectiveWeights,
    pub options: &'a AlignmentOptions,
}

/// `L_ac + lambda1 L_ga + lambda2 L_st` and its parameter gradient.
pub fn total_objective(inputs: &ObjectiveInputs<'_>) -> Result<(LossBreakdown, Gradients)> {
    let ObjectiveWeights {
        anchored,
        lambda1,
        lambda2,
    } = inputs.weights;
    let mut out = LossBreakdown {
        lambda1,
        lambda2,
        ..Default::default()
    };
    let z = inputs.weak.features();
    let mut feature_grad: Option<DMatrix<f64>> = None;
    let mut add_features = |g: &DMatrix<f64>, scale: f64| match feature_grad.as_mut() {
        Some(acc) => *acc += g * scale,
        None => feature_grad = Some(g * scale),
    };

    if let Some((source, target)) = inputs.alignment {
        if anchored {
            let ac = anchored_clustering_loss(source, target, z, inputs.decisions, inputs.options)?;
            out.l_ac = ac.value;
            out.n_ac = ac.samples;
            add_features(&ac.feature_grad, 1.0);
        }
        if lambda1 != 0.0 {
            let ga = global_alignment_loss(&source.global, &target.global, z, inputs.options)?;
            out.l_ga = ga.value;
            out.n_ga = ga.samples;
            if ga.feature_grad.nrows() == z.nrows() {
                add_features(&ga.feature_grad, lambda1);
            }
        }
    }

    let mut grads = match &feature_grad {
        Some(gf) => backward(inputs.params, inputs.weak, Some(gf), None)?,
        None => Gradients::zeros_like(inputs.params),
    };

    if lambda2 != 0.0 {
        let strong = inputs.strong.ok_or_else(|| {
            Error::InvalidArgument("self-training weight set without a strong view".into())
        })?;
        let st = self_training_term(inputs.decisions, strong)?;
        out.l_st = st.value;
        out.n_st = st.accepted;
        if st.accepted > 0 {
            let g = backward(inputs.params, strong, None, Some(&(st.grad_logits * lambda2)))?;
            grads.add_scaled(&g, 1.0);
        }
    }

    out.total = out.recomputed_total();
    Ok((out, grads))
}

/// Mean of a batch of feature rows; used by diagnostics.
pub fn feature_mean(features: &DMatrix<f64>) -> DVector<f64> {
    features.row_mean().transpose()
}
