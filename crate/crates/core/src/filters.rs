//! Pseudo-label filtering by temporal consistency and posterior confidence.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::losses::TargetBank;
use crate::network::argmax;
use crate::{Error, Result};

/// Smoothed per-sample posteriors, keyed by stable sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEma {
    xi: f64,
    entries: HashMap<u64, EmaEntry>,
}

#[derive(Debug, Clone, PartialEq)]
struct EmaEntry {
    q: Vec<f64>,
    steps: u64,
}

impl PosteriorEma {
    /// `xi` is the weight of the newest posterior.
    pub fn new(xi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&xi) {
            return Err(Error::InvalidArgument(format!("EMA coefficient {xi} not in [0, 1]")));
        }
        Ok(Self {
            xi,
            entries: HashMap::new(),
        })
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn get(&self, id: u64) -> Option<&[f64]> {
        self.entries.get(&id).map(|e| e.q.as_slice())
    }

    /// Number of updates folded into `id` so far.
    pub fn steps(&self, id: u64) -> u64 {
        self.entries.get(&id).map_or(0, |e| e.steps)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove(&mut self, id: u64) {
        self.entries.remove(&id);
    }
}

fn check_posterior(q: &[f64]) -> Result<()> {
    if q.is_empty() || q.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
        return Err(Error::InvalidArgument("posterior entries must lie in [0, 1]".into()));
    }
    let total: f64 = q.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("posterior sums to {total}")));
    }
    Ok(())
}

/// `q~ <- (1 - xi) q~ + xi q`; the first observation of an id sets `q~ = q`.
pub fn ema_update(state: &mut PosteriorEma, id: u64, q: &[f64]) -> Result<()> {
    check_posterior(q)?;
    let xi = state.xi;
    match state.entries.get_mut(&id) {
        Some(entry) => {
            if entry.q.len() != q.len() {
                return Err(Error::DimensionMismatch {
                    context: "ema_update posterior",
                    expected: entry.q.len(),
                    found: q.len(),
                });
            }
            for (s, new) in entry.q.iter_mut().zip(q) {
                *s = (1.0 - xi) * *s + xi * new;
            }
            entry.steps += 1;
        }
        None => {
            state.entries.insert(
                id,
                EmaEntry {
                    q: q.to_vec(),
                    steps: 1,
                },
            );
        }
    }
    Ok(())
}

/// Passes when the current top-class posterior did not drop below its
/// smoothed history by more than `-tau`: `q_t[y] - ema_prev[y] > tau`.
pub fn tc_filter(q_t: &[f64], ema_prev: &[f64], tau: f64) -> bool {
    let y = argmax(q_t.iter().copied());
    q_t[y] - ema_prev[y] > tau
}

/// Passes when the smoothed posterior is confident: `max_k ema[k] > tau`.
pub fn pp_filter(ema: &[f64], tau: f64) -> bool {
    ema.iter().copied().fold(f64::NEG_INFINITY, f64::max) > tau
}

/// Filter thresholds by role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub xi: f64,
    /// Temporal-consistency difference threshold; `-1` disables the filter.
    pub tau_tc_diff: f64,
    /// Smoothed-confidence threshold; `0` (or below) disables the filter.
    pub tau_pp_conf: f64,
    /// Weak-view confidence gate for self-training.
    pub tau_st: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            xi: 0.9,
            tau_tc_diff: -0.001,
            tau_pp_conf: 0.95,
            tau_st: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub id: u64,
    pub label: usize,
    pub tc_pass: bool,
    pub pp_pass: bool,
    pub st_pass: bool,
}

impl FilterDecision {
    /// Whether the sample may update its target cluster.
    pub fn accepted(&self) -> bool {
        self.tc_pass && self.pp_pass
    }
}

/// Runs the EMA and all three gates for a minibatch of weak-view posteriors.
///
/// The TC test compares against the EMA before this update (a first
/// observation is compared against itself); the PP test uses the EMA after it.
pub fn decide(
    ema: &mut PosteriorEma,
    ids: &[u64],
    probs: &DMatrix<f64>,
    cfg: &FilterConfig,
) -> Result<Vec<FilterDecision>> {
    if ids.len() != probs.nrows() {
        return Err(Error::DimensionMismatch {
            context: "filter ids",
            expected: probs.nrows(),
            found: ids.len(),
        });
    }
    let mut out = Vec::with_capacity(ids.len());
    for (row, &id) in probs.row_iter().zip(ids) {
        let q: Vec<f64> = row.iter().copied().collect();
        let label = argmax(q.iter().copied());
        let tc_pass = match ema.get(id) {
            Some(prev) => tc_filter(&q, prev, cfg.tau_tc_diff),
            None => tc_filter(&q, &q, cfg.tau_tc_diff),
        };
        ema_update(ema, id, &q)?;
        let pp_pass = pp_filter(ema.get(id).expect("just inserted"), cfg.tau_pp_conf);
        let st_pass = q[label] >= cfg.tau_st;
        out.push(FilterDecision {
            id,
            label,
            tc_pass,
            pp_pass,
            st_pass,
        });
    }
    Ok(out)
}

/// Row indices per class of the samples that passed both cluster filters.
pub fn accepted_rows(decisions: &[FilterDecision], classes: usize) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); classes];
    for (i, d) in decisions.iter().enumerate() {
        if d.accepted() && d.label < classes {
            rows[d.label].push(i);
        }
    }
    rows
}

pub(crate) fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Folds the accepted samples of each class into that class's running
/// statistics. Returns the number of accepted samples per class; classes
/// without accepted samples are left untouched.
pub fn filtered_cluster_update(
    bank: &mut TargetBank,
    features: &DMatrix<f64>,
    decisions: &[FilterDecision],
) -> Result<Vec<usize>> {
    if decisions.len() != features.nrows() {
        return Err(Error::DimensionMismatch {
            context: "filtered_cluster_update decisions",
            expected: features.nrows(),
            found: decisions.len(),
        });
    }
    let rows = accepted_rows(decisions, bank.clusters.len());
    for (cluster, idx) in bank.clusters.iter_mut().zip(&rows) {
        if !idx.is_empty() {
            cluster.update(&select_rows(features, idx))?;
        }
    }
    Ok(rows.iter().map(Vec::len).collect())
}

/// Fractions of a set of decisions passing each gate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRates {
    pub tc: f64,
    pub pp: f64,
    pub cluster: f64,
    pub st: f64,
}

impl AcceptanceRates {
    pub fn of(decisions: &[FilterDecision]) -> Self {
        if decisions.is_empty() {
            return Self::default();
        }
        let n = decisions.len() as f64;
        let frac = |f: fn(&FilterDecision) -> bool| decisions.iter().filter(|d| f(d)).count() as f64 / n;
        Self {
            tc: frac(|d| d.tc_pass),
            pp: frac(|d| d.pp_pass),
            cluster: frac(FilterDecision::accepted),
            st: frac(|d| d.st_pass),
        }
    }
}
