//! Gaussian statistics and streaming moment estimation.
//!
//! Batches of feature vectors are `n x d` matrices with one sample per row.
//! Covariances are population (1/N) moments throughout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Mean vector and covariance matrix of one cluster or of a whole domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Builds a Gaussian, symmetrizing `cov`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_square(&cov)?;
        if cov.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "gaussian covariance",
                expected: mean.len(),
                found: cov.nrows(),
            });
        }
        Ok(Self {
            mean,
            cov: symmetrize(&cov),
        })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::zeros(dim, dim),
        }
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Returns a copy with the covariance passed through `reg`.
    pub fn regularized(&self, reg: &CovRegularizer) -> Result<Self> {
        Ok(Self {
            mean: self.mean.clone(),
            cov: regularize_cov(&self.cov, reg.eps_for(&self.cov))?,
        })
    }
}

/// Nonnegative mixture weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("mixture weights"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "mixture weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Self(weights))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for MixtureWeights {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<MixtureWeights> for Vec<f64> {
    fn from(value: MixtureWeights) -> Self {
        value.0
    }
}

/// Scale-aware diagonal loading applied before every inverse or determinant.
///
/// `eps = max(relative * trace(cov) / d, floor)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovRegularizer {
    pub relative: f64,
    pub floor: f64,
}

impl Default for CovRegularizer {
    fn default() -> Self {
        Self {
            relative: 1e-5,
            floor: 1e-8,
        }
    }
}

impl CovRegularizer {
    pub fn eps_for(&self, cov: &DMatrix<f64>) -> f64 {
        let d = cov.nrows().max(1) as f64;
        (self.relative * cov.trace() / d).max(self.floor)
    }

    /// Whether the trace-proportional branch of `eps_for` is the active one,
    /// i.e. whether eps depends on `cov`.
    pub fn is_relative(&self, cov: &DMatrix<f64>) -> bool {
        let d = cov.nrows().max(1) as f64;
        self.relative * cov.trace() / d > self.floor
    }

    /// Pulls a gradient with respect to the regularized covariance back to
    /// the raw covariance.
    pub fn backward(&self, cov: &DMatrix<f64>, grad_reg: &DMatrix<f64>) -> DMatrix<f64> {
        let mut grad = grad_reg.clone();
        if self.is_relative(cov) {
            let d = cov.nrows() as f64;
            let scale = self.relative / d * grad_reg.trace();
            for i in 0..cov.nrows() {
                grad[(i, i)] += scale;
            }
        }
        grad
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Returns `cov + eps * I`.
pub fn regularize_cov(cov: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    check_square(cov)?;
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "regularization eps must be positive, got {eps}"
        )));
    }
    let scale = cov.amax().max(1.0);
    let asym = max_asymmetry(cov);
    if asym > 1e-9 * scale {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let mut out = cov.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += eps;
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor `L` with `L * L^T = matrix`.
///
/// Only the lower triangle of `matrix` is read.
pub fn cholesky_psd(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(matrix)?;
    let n = matrix.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = matrix[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !diag.is_finite() || diag <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: diag,
            });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = matrix[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Cholesky factor together with the derived quantities the KL terms need.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    pub fn new(matrix: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            l: cholesky_psd(matrix)?,
        })
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Solves `A x = b` for every column of `b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.l.nrows();
        let mut x = b.clone();
        for c in 0..x.ncols() {
            // forward: L y = b
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= self.l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
            // backward: L^T x = y
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in (i + 1)..n {
                    s -= self.l[(k, i)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
        }
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        DVector::from_column_slice(self.solve(&m).as_slice())
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        symmetrize(&self.solve(&DMatrix::identity(n, n)))
    }
}

fn check_same_dim(p: &GaussianStats, q: &GaussianStats) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            context: "gaussian_kl",
            expected: p.dim(),
            found: q.dim(),
        });
    }
    Ok(())
}

/// Closed-form `KL(p || q)` between two Gaussians with positive definite
/// covariances.
pub fn gaussian_kl(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    Ok(gaussian_kl_grad(p, q)?.value)
}

/// `KL(p || q)` and its gradient with respect to the parameters of `q`.
#[derive(Debug, Clone)]
pub struct KlGrad {
    pub value: f64,
    pub d_mean_q: DVector<f64>,
    /// Symmetric gradient with respect to `q.cov`.
    pub d_cov_q: DMatrix<f64>,
}

pub fn gaussian_kl_grad(p: &GaussianStats, q: &GaussianStats) -> Result<KlGrad> {
    check_same_dim(p, q)?;
    let d = p.dim() as f64;
    let chol_p = Cholesky::new(&p.cov)?;
    let chol_q = Cholesky::new(&q.cov)?;
    let q_inv = chol_q.inverse();
    let diff = &q.mean - &p.mean;
    let q_inv_diff = &q_inv * &diff;
    let mahalanobis = diff.dot(&q_inv_diff);
    let q_inv_p = &q_inv * &p.cov;
    let trace = q_inv_p.trace();
    let value = 0.5 * (chol_q.log_det() - chol_p.log_det() - d + mahalanobis + trace);

    // dKL/dSigma_q = 1/2 [Sq^-1 - Sq^-1 (diff diff^T + Sp) Sq^-1]
    let outer = &q_inv_diff * q_inv_diff.transpose();
    let sandwich = &q_inv_p * &q_inv;
    let d_cov_q = symmetrize(&((&q_inv - outer - sandwich) * 0.5));
    Ok(KlGrad {
        value,
        d_mean_q: q_inv_diff,
        d_cov_q,
    })
}

/// Population mean and (1/N) covariance of the rows of `features`.
pub fn batch_moments(features: &DMatrix<f64>) -> Result<GaussianStats> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::Empty("batch_moments"));
    }
    let mean: DVector<f64> = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / n as f64;
    Ok(GaussianStats {
        mean,
        cov: symmetrize(&cov),
    })
}

/// Update rate `1/count` saturating at `1/clip`.
pub fn clipped_rate(count: u64, clip: Option<u64>) -> Result<f64> {
    if count == 0 {
        return Err(Error::InvalidArgument("clipped_rate: count must be >= 1".into()));
    }
    match clip {
        Some(0) => Err(Error::InvalidArgument("clipped_rate: clip must be >= 1".into())),
        Some(c) if count >= c => Ok(1.0 / c as f64),
        _ => Ok(1.0 / count as f64),
    }
}

/// Memory-bounded running estimate of a Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: u64,
    /// Upper bound on the effective sample count; `None` is unbounded.
    pub clip: Option<u64>,
}

/// What a single running update did, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateTrace {
    pub rate: f64,
    pub new_mean: DVector<f64>,
}

impl RunningStats {
    /// Empty statistics: zero mean, zero covariance, zero count.
    pub fn empty(dim: usize, clip: Option<u64>) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::zeros(dim, dim),
            count: 0,
            clip,
        }
    }

    /// Statistics seeded with a prior Gaussian carrying `count` pseudo-samples.
    pub fn warm(prior: &GaussianStats, count: u64, clip: Option<u64>) -> Self {
        Self {
            mean: prior.mean.clone(),
            cov: symmetrize(&prior.cov),
            count,
            clip,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn gaussian(&self) -> GaussianStats {
        GaussianStats {
            mean: self.mean.clone(),
            cov: self.cov.clone(),
        }
    }

    /// Folds a batch into the statistics (see [`running_update`]).
    pub fn update(&mut self, batch: &DMatrix<f64>) -> Result<UpdateTrace> {
        let (next, trace) = running_update(self, batch)?;
        *self = next;
        Ok(trace)
    }
}

/// Moment update of `stats` with a nonempty batch.
///
/// With `n = |batch|`, `count' = count + n` and `a = clipped_rate(count', clip)`:
///
/// ```text
/// delta = a * sum_i (z_i - mean)
/// mean' = mean + delta
/// cov'  = cov + a * sum_i [(z_i - mean)(z_i - mean)^T - cov] - delta delta^T
/// ```
pub fn running_update(
    stats: &RunningStats,
    batch: &DMatrix<f64>,
) -> Result<(RunningStats, UpdateTrace)> {
    let n = batch.nrows();
    if n == 0 {
        return Err(Error::Empty("running_update batch"));
    }
    if batch.ncols() != stats.dim() {
        return Err(Error::DimensionMismatch {
            context: "running_update",
            expected: stats.dim(),
            found: batch.ncols(),
        });
    }
    let count = stats.count + n as u64;
    let rate = clipped_rate(count, stats.clip)?;

    let mut dev = batch.clone();
    for mut row in dev.row_iter_mut() {
        row -= stats.mean.transpose();
    }
    let dev_sum: DVector<f64> = dev.row_sum().transpose();
    let delta = dev_sum * rate;
    let mean = &stats.mean + &delta;
    let scatter = dev.transpose() * &dev;
    let cov = &stats.cov + (scatter - &stats.cov * n as f64) * rate - &delta * delta.transpose();

    let trace = UpdateTrace {
        rate,
        new_mean: mean.clone(),
    };
    Ok((
        RunningStats {
            mean,
            cov: symmetrize(&cov),
            count,
            clip: stats.clip,
        },
        trace,
    ))
}

/// Gradient of a loss with respect to the batch rows of a running update,
/// given the loss gradients on the updated mean and covariance. The prior
/// statistics are constants.
///
/// `dL/dz_i = a * g_mean + a * (G + G^T) (z_i - mean')`
pub fn running_update_backward(
    trace: &UpdateTrace,
    batch: &DMatrix<f64>,
    grad_mean: &DVector<f64>,
    grad_cov: Option<&DMatrix<f64>>,
) -> DMatrix<f64> {
    let a = trace.rate;
    let mut out = DMatrix::zeros(batch.nrows(), batch.ncols());
    let g_sym = grad_cov.map(|g| g + g.transpose());
    for (i, row) in batch.row_iter().enumerate() {
        let mut g = grad_mean * a;
        if let Some(gs) = &g_sym {
            let centered = row.transpose() - &trace.new_mean;
            g += gs * centered * a;
        }
        out.set_row(i, &g.transpose());
    }
    out
}

/// Moment-matched single Gaussian for a weighted mixture.
pub fn merge_mixture(
    components: &[GaussianStats],
    weights: &MixtureWeights,
) -> Result<GaussianStats> {
    let first = components.first().ok_or(Error::Empty("merge_mixture components"))?;
    if weights.len() != components.len() {
        return Err(Error::DimensionMismatch {
            context: "merge_mixture weights",
            expected: components.len(),
            found: weights.len(),
        });
    }
    let d = first.dim();
    if let Some(bad) = components.iter().find(|c| c.dim() != d) {
        return Err(Error::DimensionMismatch {
            context: "merge_mixture component",
            expected: d,
            found: bad.dim(),
        });
    }
    let mut mean = DVector::zeros(d);
    for (c, w) in components.iter().zip(weights.as_slice()) {
        mean += &c.mean * *w;
    }
    let mut cov = DMatrix::zeros(d, d);
    for (c, w) in components.iter().zip(weights.as_slice()) {
        let diff = &c.mean - &mean;
        cov += (&c.cov + &diff * diff.transpose()) * *w;
    }
    Ok(GaussianStats {
        mean,
        cov: symmetrize(&cov),
    })
}
