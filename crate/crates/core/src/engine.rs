//! Sequential predict-then-adapt driver.
//!
//! Every arriving batch is first classified with the current weights and the
//! labels are committed. Only then is the batch pushed into the sample queue
//! and the model adapted for `n_itr` epochs over the queue.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Batch, Dataset};
use crate::filters::{
    decide, filtered_cluster_update, select_rows, AcceptanceRates, FilterConfig, FilterDecision,
    PosteriorEma,
};
use crate::losses::{
    augment, total_objective, AlignmentOptions, AugmentationConfig, GlobalAlignment,
    LossBreakdown, ObjectiveInputs, ObjectiveWeights, StatGradient, TargetBank, TargetInit,
};
use crate::network::{
    backward, entropy_loss, forward, sgd_step, Gradients, ModelParams, OptimizerState, TrainScope,
};
use crate::source::{Provenance, SourceBank};
use crate::stats::CovRegularizer;
use crate::{Error, Result};

/// Test-time training protocol: one pass (`N-O`) or multiple passes (`N-M`)
/// over the target data, with inferred (`SF`) or estimated (`SL`) anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "N-O-SF")]
    NOSF,
    #[default]
    #[serde(rename = "N-O-SL")]
    NOSL,
    #[serde(rename = "N-M-SF")]
    NMSF,
    #[serde(rename = "N-M-SL")]
    NMSL,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::NOSF, Protocol::NOSL, Protocol::NMSF, Protocol::NMSL];

    pub fn multi_pass(self) -> bool {
        matches!(self, Protocol::NMSF | Protocol::NMSL)
    }

    pub fn source_free(self) -> bool {
        matches!(self, Protocol::NOSF | Protocol::NMSF)
    }

    pub fn required_provenance(self) -> Provenance {
        if self.source_free() {
            Provenance::Inferred
        } else {
            Provenance::Estimated
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::NOSF => "N-O-SF",
            Protocol::NOSL => "N-O-SL",
            Protocol::NMSF => "N-M-SF",
            Protocol::NMSL => "N-M-SL",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown protocol {s:?}")))
    }
}

/// Adaptation method run by the driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "TTAC++")]
    TtacPlusPlus,
    /// Frozen source model.
    #[serde(rename = "TEST")]
    Test,
    #[serde(rename = "ENTROPY_MIN")]
    EntropyMin,
    /// Self-training alone, no statistics.
    #[serde(rename = "ST_ONLY")]
    StOnly,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::TtacPlusPlus, Method::Test, Method::EntropyMin, Method::StOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::TtacPlusPlus => "TTAC++",
            Method::Test => "TEST",
            Method::EntropyMin => "ENTROPY_MIN",
            Method::StOnly => "ST_ONLY",
        }
    }

    pub fn needs_source(self) -> bool {
        self == Method::TtacPlusPlus
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(&norm))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// Every knob of a stream run. Unknown JSON keys are rejected; missing keys
/// take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    /// Posterior EMA smoothing.
    pub xi: f64,
    pub tau_tc_diff: f64,
    pub tau_pp_conf: f64,
    pub tau_st: f64,
    pub n_clip: u64,
    pub n_clip_k: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Queue capacity in samples.
    pub n_c: usize,
    /// Adaptation epochs over the queue per arriving batch.
    pub n_itr: usize,
    /// Arrival batch size and adaptation minibatch size.
    pub n_b: usize,
    /// Passes over the target data for multi-pass protocols.
    pub passes: usize,
    /// Multi-pass only: commit predictions during the last adaptation pass
    /// instead of a separate frozen pass.
    pub interleave_inference: bool,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Absent: magnitudes relative to the model's `input_std`.
    pub aug: Option<AugmentationConfig>,
    pub anchored: bool,
    pub target_init: TargetInit,
    /// Pseudo-sample count of a warm start; absent means one full clip.
    pub warm_count: Option<u64>,
    pub stat_gradient: StatGradient,
    pub global_alignment: GlobalAlignment,
    pub regularizer: CovRegularizer,
    /// Parameters updated by the entropy-minimization baseline.
    pub entropy_scope: TrainScope,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let f = FilterConfig::default();
        Self {
            protocol: Protocol::default(),
            xi: f.xi,
            tau_tc_diff: f.tau_tc_diff,
            tau_pp_conf: f.tau_pp_conf,
            tau_st: f.tau_st,
            n_clip: 1280,
            n_clip_k: 128,
            lambda1: 1.0,
            lambda2: 10.0,
            n_c: 4096,
            n_itr: 4,
            n_b: 256,
            passes: 3,
            interleave_inference: false,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            aug: None,
            anchored: true,
            target_init: TargetInit::default(),
            warm_count: None,
            stat_gradient: StatGradient::default(),
            global_alignment: GlobalAlignment::default(),
            regularizer: CovRegularizer::default(),
            entropy_scope: TrainScope::HeadAndLastLayer,
        }
    }
}

impl ProtocolConfig {
    pub fn filters(&self) -> FilterConfig {
        FilterConfig {
            xi: self.xi,
            tau_tc_diff: self.tau_tc_diff,
            tau_pp_conf: self.tau_pp_conf,
            tau_st: self.tau_st,
        }
    }

    pub fn alignment(&self) -> AlignmentOptions {
        AlignmentOptions {
            regularizer: self.regularizer,
            stat_gradient: self.stat_gradient,
            global: self.global_alignment,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_b == 0 {
            return bad("n_b must be positive".into());
        }
        if self.n_c < self.n_b {
            return bad(format!("queue length n_c = {} is smaller than n_b = {}", self.n_c, self.n_b));
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return bad(format!("xi = {} outside [0, 1]", self.xi));
        }
        if self.n_clip == 0 || self.n_clip_k == 0 {
            return bad("clip counts must be positive".into());
        }
        if self.protocol.multi_pass() && self.passes == 0 {
            return bad("multi-pass protocols need passes >= 1".into());
        }
        let finite = [
            self.tau_tc_diff,
            self.tau_pp_conf,
            self.tau_st,
            self.lambda1,
            self.lambda2,
            self.lr,
            self.momentum,
            self.weight_decay,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite hyperparameter".into());
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr and weight_decay must be >= 0 and momentum in [0, 1)".into());
        }
        if let Some(a) = &self.aug {
            a.validate()?;
        }
        Ok(())
    }

    /// Reads a JSON config file.
    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// FIFO buffer of arrival batches bounded by a sample capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueState {
    capacity: usize,
    batches: VecDeque<(Vec<u64>, DMatrix<f64>)>,
    len: usize,
    arrivals: u64,
}

impl QueueState {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            batches: VecDeque::new(),
            len: 0,
            arrivals: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Arrival batches pushed so far.
    pub fn arrivals(&self) -> u64 {
        self.arrivals
    }

    /// Appends a batch, evicting whole batches from the front until it fits.
    /// Returns the evicted ids.
    pub fn push(&mut self, ids: Vec<u64>, inputs: DMatrix<f64>) -> Result<Vec<u64>> {
        if ids.len() != inputs.nrows() {
            return Err(Error::DimensionMismatch {
                context: "queue batch ids",
                expected: inputs.nrows(),
                found: ids.len(),
            });
        }
        if ids.len() > self.capacity {
            return Err(Error::InvalidArgument(format!(
                "batch of {} exceeds queue capacity {}",
                ids.len(),
                self.capacity
            )));
        }
        let mut evicted = Vec::new();
        while self.len + ids.len() > self.capacity {
            let (old, _) = self.batches.pop_front().expect("nonempty while over capacity");
            self.len -= old.len();
            evicted.extend(old);
        }
        self.len += ids.len();
        self.arrivals += 1;
        self.batches.push_back((ids, inputs));
        Ok(evicted)
    }

    /// Queued ids in arrival order.
    pub fn ids(&self) -> Vec<u64> {
        self.batches.iter().flat_map(|(ids, _)| ids.iter().copied()).collect()
    }

    /// All queued samples stacked in arrival order.
    pub fn contents(&self) -> (Vec<u64>, DMatrix<f64>) {
        let d = self.batches.front().map_or(0, |(_, x)| x.ncols());
        let mut x = DMatrix::zeros(self.len, d);
        let mut row = 0;
        for (_, b) in &self.batches {
            x.rows_mut(row, b.nrows()).copy_from(b);
            row += b.nrows();
        }
        (self.ids(), x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    /// Position in the committed stream.
    pub arrival: usize,
    pub id: u64,
    pub label: usize,
    pub truth: Option<usize>,
}

/// One optimisation step on a queue minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Arrival batch whose adaptation produced this step.
    pub batch: usize,
    pub epoch: usize,
    pub size: usize,
    pub losses: LossBreakdown,
    pub rates: AcceptanceRates,
    pub skipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub index: usize,
    pub size: usize,
    pub steps: usize,
    /// Wall time for prediction plus adaptation.
    pub wall_ms: f64,
}

/// Everything a stream run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub method: Method,
    pub protocol: Protocol,
    pub predictions: Vec<Prediction>,
    /// Error rate over the first `i + 1` committed predictions; empty for
    /// unlabelled streams.
    pub cumulative_error: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub batches: Vec<BatchRecord>,
    pub skipped_steps: usize,
    pub final_error: Option<f64>,
}

impl StreamReport {
    fn new(method: Method, protocol: Protocol) -> Self {
        Self {
            method,
            protocol,
            predictions: Vec::new(),
            cumulative_error: Vec::new(),
            steps: Vec::new(),
            batches: Vec::new(),
            skipped_steps: 0,
            final_error: None,
        }
    }

    /// Recomputes the cumulative error curve and summary fields from the
    /// committed predictions.
    pub fn finalize(&mut self) {
        self.cumulative_error.clear();
        if self.predictions.iter().all(|p| p.truth.is_some()) && !self.predictions.is_empty() {
            let mut wrong = 0usize;
            for (i, p) in self.predictions.iter().enumerate() {
                wrong += usize::from(Some(p.label) != p.truth);
                self.cumulative_error.push(wrong as f64 / (i + 1) as f64);
            }
        }
        self.final_error = self.cumulative_error.last().copied();
        self.skipped_steps = self.steps.iter().filter(|s| s.skipped).count();
    }

    /// Copy with wall-clock fields zeroed, for bitwise comparisons.
    pub fn strip_timing(&self) -> Self {
        let mut out = self.clone();
        out.batches.iter_mut().for_each(|b| b.wall_ms = 0.0);
        out
    }

    /// Mean acceptance rates over all non-skipped steps.
    pub fn mean_rates(&self) -> AcceptanceRates {
        let steps: Vec<&StepRecord> = self.steps.iter().filter(|s| !s.skipped).collect();
        if steps.is_empty() {
            return AcceptanceRates::default();
        }
        let n = steps.len() as f64;
        let mut r = AcceptanceRates::default();
        for s in steps {
            r.tc += s.rates.tc / n;
            r.pp += s.rates.pp / n;
            r.cluster += s.rates.cluster / n;
            r.st += s.rates.st / n;
        }
        r
    }

    pub fn labels(&self) -> Vec<usize> {
        self.predictions.iter().map(|p| p.label).collect()
    }

    /// `arrival,cumulative_error` rows.
    pub fn write_cumulative_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["arrival", "cumulative_error"])?;
        for (i, e) in self.cumulative_error.iter().enumerate() {
            w.write_record([i.to_string(), format!("{e:?}")])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// `arrival,id,label,truth` rows; `truth` empty when unknown.
    /// Writes report.json, cumulative_error.csv and predictions.csv into
    /// `dir`, creating it if needed.
    pub fn write_dir(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("cumulative_error.csv");
        self.write_cumulative_csv(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?)?;
        let path = dir.join("predictions.csv");
        self.write_predictions_csv(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?)
    }

    pub fn write_predictions_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["arrival", "id", "label", "truth"])?;
        for p in &self.predictions {
            w.write_record([
                p.arrival.to_string(),
                p.id.to_string(),
                p.label.to_string(),
                p.truth.map(|t| t.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Single-writer adaptation state: model, optimizer, statistics, EMA and
/// queue.
pub struct Session {
    method: Method,
    cfg: ProtocolConfig,
    params: ModelParams,
    snapshot: Arc<ModelParams>,
    source: Option<SourceBank>,
    target: Option<TargetBank>,
    ema: PosteriorEma,
    queue: QueueState,
    opt: OptimizerState,
    aug: AugmentationConfig,
    rng: ChaCha8Rng,
    report: StreamReport,
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::NotPositiveDefinite { .. })
}

impl Session {
    /// `source` is required for TTAC++ and must match the protocol's
    /// provenance; baselines ignore it.
    pub fn new(
        method: Method,
        cfg: ProtocolConfig,
        model: ModelParams,
        source: Option<SourceBank>,
    ) -> Result<Self> {
        cfg.validate()?;
        let source = if method.needs_source() {
            let s = source.ok_or_else(|| {
                Error::InvalidArgument(format!("{method} needs a source bank"))
            })?;
            let required = cfg.protocol.required_provenance();
            if s.provenance != required {
                return Err(Error::ProvenanceMismatch {
                    protocol: cfg.protocol.to_string(),
                    provenance: s.provenance.to_string(),
                });
            }
            s.validate()?;
            if s.dim() != model.feature_dim() || s.k() != model.classes() {
                return Err(Error::DimensionMismatch {
                    context: "source bank vs model features",
                    expected: model.feature_dim(),
                    found: s.dim(),
                });
            }
            Some(s)
        } else {
            None
        };
        let target = source.as_ref().map(|s| match (cfg.target_init, cfg.warm_count) {
            (TargetInit::SourceAnchors, Some(count)) => TargetBank::warm(s, cfg.n_clip, cfg.n_clip_k, count),
            (init, _) => TargetBank::new(s, cfg.n_clip, cfg.n_clip_k, init),
        });
        let aug = cfg.aug.unwrap_or_else(|| AugmentationConfig::relative_to(model.input_std));
        aug.validate()?;
        Ok(Self {
            method,
            opt: OptimizerState::new(&model, cfg.lr, cfg.momentum, cfg.weight_decay),
            snapshot: Arc::new(model.clone()),
            params: model,
            source,
            target,
            ema: PosteriorEma::new(cfg.xi)?,
            queue: QueueState::new(cfg.n_c),
            aug,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            report: StreamReport::new(method, cfg.protocol),
            cfg,
        })
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn target(&self) -> Option<&TargetBank> {
        self.target.as_ref()
    }

    pub fn queue(&self) -> &QueueState {
        &self.queue
    }

    pub fn ema(&self) -> &PosteriorEma {
        &self.ema
    }

    pub fn report(&self) -> &StreamReport {
        &self.report
    }

    /// Weights as of the last completed adaptation step.
    pub fn snapshot(&self) -> Arc<ModelParams> {
        Arc::clone(&self.snapshot)
    }

    /// Classifies the raw batch with the current weights and records the
    /// labels. Must be called before the batch is used for adaptation.
    pub fn predict_and_commit(&mut self, batch: &Batch) -> Result<Vec<usize>> {
        let labels = self.params.predict(&batch.inputs)?;
        let start = self.report.predictions.len();
        for (i, (&id, &label)) in batch.ids.iter().zip(&labels).enumerate() {
            self.report.predictions.push(Prediction {
                arrival: start + i,
                id,
                label,
                truth: batch.labels.as_ref().map(|l| l[i]),
            });
        }
        Ok(labels)
    }

    /// Queues the batch and runs `n_itr` epochs of minibatch adaptation over
    /// the queue.
    pub fn sttt_step(&mut self, batch: &Batch) -> Result<()> {
        if self.method == Method::Test {
            return Ok(());
        }
        let index = self.report.batches.len();
        for id in self.queue.push(batch.ids.clone(), batch.inputs.clone())? {
            self.ema.remove(id);
        }
        let (ids, x) = self.queue.contents();
        let mut order: Vec<usize> = (0..ids.len()).collect();
        for epoch in 0..self.cfg.n_itr {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.cfg.n_b) {
                let mb_ids: Vec<u64> = chunk.iter().map(|&i| ids[i]).collect();
                let mb = select_rows(&x, chunk);
                let record = self.adapt_minibatch(index, epoch, &mb_ids, &mb)?;
                self.report.steps.push(record);
            }
        }
        self.snapshot = Arc::new(self.params.clone());
        Ok(())
    }

    /// Predict, then adapt, then record timing.
    pub fn process(&mut self, batch: &Batch) -> Result<Vec<usize>> {
        let t0 = Instant::now();
        let steps_before = self.report.steps.len();
        let labels = self.predict_and_commit(batch)?;
        self.sttt_step(batch)?;
        self.record_batch(batch.ids.len(), steps_before, t0);
        Ok(labels)
    }

    /// Adapt only (no committed predictions); used by multi-pass warm-up
    /// passes and by the adaptation lane.
    pub fn observe(&mut self, batch: &Batch) -> Result<()> {
        let t0 = Instant::now();
        let steps_before = self.report.steps.len();
        self.sttt_step(batch)?;
        self.record_batch(batch.ids.len(), steps_before, t0);
        Ok(())
    }

    fn record_batch(&mut self, size: usize, steps_before: usize, t0: Instant) {
        let index = self.report.batches.len();
        self.report.batches.push(BatchRecord {
            index,
            size,
            steps: self.report.steps.len() - steps_before,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }

    fn adapt_minibatch(
        &mut self,
        batch: usize,
        epoch: usize,
        ids: &[u64],
        x: &DMatrix<f64>,
    ) -> Result<StepRecord> {
        let mut record = StepRecord {
            batch,
            epoch,
            size: ids.len(),
            losses: LossBreakdown::default(),
            rates: AcceptanceRates::default(),
            skipped: false,
        };
        let grads = match self.method {
            Method::Test => return Ok(record),
            Method::EntropyMin => {
                let trace = forward(&self.params, x)?;
                let (value, gl) = entropy_loss(&trace);
                record.losses.total = value;
                let mut g = backward(&self.params, &trace, None, Some(&gl))?;
                g.restrict(self.cfg.entropy_scope);
                Ok(g)
            }
            Method::StOnly | Method::TtacPlusPlus => self.ttac_gradients(ids, x, &mut record),
        };
        let step = grads.and_then(|g| sgd_step(&mut self.params, &g, &mut self.opt));
        match step {
            Ok(()) => {}
            Err(e) if is_numerical(&e) => {
                warn!("batch {batch} epoch {epoch}: step skipped: {e}");
                record.skipped = true;
            }
            Err(e) => return Err(e),
        }
        if !record.losses.total.is_finite() && !record.skipped {
            record.skipped = true;
        }
        Ok(record)
    }

    /// Filters, objective and statistic commit for TTAC++ and ST_ONLY.
    /// Statistics are committed even when the gradient is unusable.
    fn ttac_gradients(
        &mut self,
        ids: &[u64],
        x: &DMatrix<f64>,
        record: &mut StepRecord,
    ) -> Result<Gradients> {
        let (weak, strong) = augment(x, &self.aug, &mut self.rng);
        let weak_trace = forward(&self.params, &weak)?;
        let decisions: Vec<FilterDecision> =
            decide(&mut self.ema, ids, &weak_trace.probs, &self.cfg.filters())?;
        record.rates = AcceptanceRates::of(&decisions);
        let ttac = self.method == Method::TtacPlusPlus;
        let weights = if ttac {
            ObjectiveWeights {
                anchored: self.cfg.anchored,
                lambda1: self.cfg.lambda1,
                lambda2: self.cfg.lambda2,
            }
        } else {
            ObjectiveWeights {
                anchored: false,
                lambda1: 0.0,
                lambda2: self.cfg.lambda2,
            }
        };
        let strong_trace = if weights.lambda2 != 0.0 {
            Some(forward(&self.params, &strong)?)
        } else {
            None
        };
        let options = self.cfg.alignment();
        let alignment = match (ttac, &self.source, &self.target) {
            (true, Some(s), Some(t)) => Some((s, t)),
            _ => None,
        };
        let objective = total_objective(&ObjectiveInputs {
            params: &self.params,
            alignment,
            weak: &weak_trace,
            strong: strong_trace.as_ref(),
            decisions: &decisions,
            weights,
            options: &options,
        });
        if let Some(target) = self.target.as_mut().filter(|_| ttac) {
            let z = weak_trace.features();
            filtered_cluster_update(target, z, &decisions)?;
            target.global.update(z)?;
        }
        let (losses, grads) = objective?;
        debug!("step losses {losses:?}");
        record.losses = losses;
        if !losses.total.is_finite() {
            return Err(Error::NonFinite(format!("objective {losses:?}")));
        }
        Ok(grads)
    }

    pub fn finish(mut self) -> (StreamReport, ModelParams) {
        self.report.finalize();
        (self.report, self.params)
    }
}

fn run_method(
    method: Method,
    cfg: &ProtocolConfig,
    source: Option<&SourceBank>,
    model: &ModelParams,
    stream: &Dataset,
) -> Result<StreamReport> {
    let mut session = Session::new(method, cfg.clone(), model.clone(), source.cloned())?;
    let arrivals = batches(stream, cfg.n_b)?;
    if !cfg.protocol.multi_pass() {
        for b in &arrivals {
            session.process(b)?;
        }
    } else {
        for pass in 0..cfg.passes {
            let last = pass + 1 == cfg.passes;
            for b in &arrivals {
                if last && cfg.interleave_inference {
                    session.process(b)?;
                } else {
                    session.observe(b)?;
                }
            }
        }
        if !cfg.interleave_inference {
            for b in &arrivals {
                let t0 = Instant::now();
                session.predict_and_commit(b)?;
                let steps = session.report.steps.len();
                session.record_batch(b.ids.len(), steps, t0);
            }
        }
    }
    Ok(session.finish().0)
}

/// TTAC++ over a stream under the configured protocol.
pub fn run_stream(
    cfg: &ProtocolConfig,
    source: &SourceBank,
    model: &ModelParams,
    stream: &Dataset,
) -> Result<StreamReport> {
    run_method(Method::TtacPlusPlus, cfg, Some(source), model, stream)
}

/// A baseline adapter driven by the same causal loop.
pub fn run_baseline(
    kind: Method,
    cfg: &ProtocolConfig,
    model: &ModelParams,
    stream: &Dataset,
) -> Result<StreamReport> {
    if kind.needs_source() {
        return Err(Error::InvalidArgument(format!("{kind} is not a baseline")));
    }
    run_method(kind, cfg, None, model, stream)
}

/// Any method; `source` is only read by TTAC++.
pub fn run(
    method: Method,
    cfg: &ProtocolConfig,
    source: Option<&SourceBank>,
    model: &ModelParams,
    stream: &Dataset,
) -> Result<StreamReport> {
    run_method(method, cfg, source, model, stream)
}

/// Adaptation running on its own thread. Batches go in over a channel and
/// each completed adaptation publishes a fresh weight snapshot; the caller
/// predicts with whatever snapshot it last received.
pub struct AdaptationLane {
    batches: Option<mpsc::Sender<Batch>>,
    snapshots: mpsc::Receiver<Arc<ModelParams>>,
    worker: Option<thread::JoinHandle<Result<(StreamReport, ModelParams)>>>,
}

impl AdaptationLane {
    pub fn spawn(session: Session) -> Self {
        let (btx, brx) = mpsc::channel::<Batch>();
        let (stx, srx) = mpsc::channel();
        let worker = thread::spawn(move || {
            let mut session = session;
            for b in brx {
                session.observe(&b)?;
                // the receiver may already be gone; adaptation still finishes
                let _ = stx.send(session.snapshot());
            }
            Ok(session.finish())
        });
        Self {
            batches: Some(btx),
            snapshots: srx,
            worker: Some(worker),
        }
    }

    pub fn submit(&self, batch: Batch) -> Result<()> {
        self.batches
            .as_ref()
            .expect("sender present until join")
            .send(batch)
            .map_err(|_| Error::InvalidArgument("adaptation lane has stopped".into()))
    }

    /// Most recent snapshot published since the last call, if any.
    pub fn latest(&self) -> Option<Arc<ModelParams>> {
        self.snapshots.try_iter().last()
    }

    /// Blocks until the next snapshot is published.
    pub fn wait(&self) -> Option<Arc<ModelParams>> {
        self.snapshots.recv().ok()
    }

    pub fn join(mut self) -> Result<(StreamReport, ModelParams)> {
        drop(self.batches.take());
        self.worker
            .take()
            .expect("joined once")
            .join()
            .map_err(|_| Error::InvalidArgument("adaptation lane panicked".into()))?
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Architecture;
    use crate::source::{build_inferred_bank, estimate_source_stats};
    use rand::Rng;

    fn model(seed: u64) -> ModelParams {
        let arch = Architecture { input_dim: 4, hidden: vec![8], feature_dim: 6, classes: 3 };
        ModelParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn stream(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let x = DMatrix::from_fn(n, 4, |i, j| {
            let c = labels[i] as f64;
            c * if j % 2 == 0 { 1.5 } else { -1.0 } + rng.random::<f64>() - 0.5
        });
        Dataset::new(x, Some(labels)).unwrap()
    }

    fn bank(m: &ModelParams, data: &Dataset) -> SourceBank {
        let z = forward(m, &data.inputs).unwrap();
        let labels = data.labels.as_ref().unwrap();
        let feats: Vec<DMatrix<f64>> = (0..3)
            .map(|k| {
                let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
                select_rows(z.features(), &idx)
            })
            .collect();
        estimate_source_stats(&feats).unwrap()
    }

    fn small_cfg() -> ProtocolConfig {
        ProtocolConfig { n_b: 8, n_c: 24, n_itr: 2, n_clip: 64, n_clip_k: 16, tau_pp_conf: 0.5, ..Default::default() }
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in Protocol::ALL {
            assert_eq!(p.as_str().parse::<Protocol>().unwrap(), p);
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(json, format!("\"{}\"", p.as_str()));
        }
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("N-X-SL".parse::<Protocol>().is_err());
    }

    #[test]
    fn config_json_uses_symbol_keys_and_defaults() {
        let cfg: ProtocolConfig = serde_json::from_str(r#"{"n_b": 32, "n_c": 64, "xi": 0.5, "tau_tc_diff": -1.0}"#).unwrap();
        assert_eq!((cfg.n_b, cfg.n_c, cfg.xi, cfg.tau_tc_diff), (32, 64, 0.5, -1.0));
        assert_eq!(cfg.lambda2, 10.0);
        assert_eq!((cfg.n_c, cfg.n_itr), (64, 4));
        assert_eq!((ProtocolConfig::default().n_c, ProtocolConfig::default().n_itr), (4096, 4));
        assert!(serde_json::from_str::<ProtocolConfig>(r#"{"nb": 3}"#).is_err());
        let bad = ProtocolConfig { n_c: 4, n_b: 8, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn queue_is_fifo_by_batch_and_bounded() {
        let mut q = QueueState::new(10);
        let b = |ids: Vec<u64>| {
            let n = ids.len();
            (ids, DMatrix::from_element(n, 2, 0.0))
        };
        let (i, x) = b(vec![0, 1, 2, 3]);
        assert!(q.push(i, x).unwrap().is_empty());
        let (i, x) = b(vec![4, 5, 6, 7]);
        assert!(q.push(i, x).unwrap().is_empty());
        let (i, x) = b(vec![8, 9, 10, 11]);
        assert_eq!(q.push(i, x).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(q.ids(), vec![4, 5, 6, 7, 8, 9, 10, 11]);
        assert!(q.len() <= q.capacity());
        let (i, x) = b((20..31).collect());
        assert!(q.push(i, x).is_err());
    }

    #[test]
    fn provenance_must_match_protocol() {
        let m = model(1);
        let data = stream(2, 48);
        let estimated = bank(&m, &data);
        let inferred = build_inferred_bank(&DMatrix::from_fn(3, 6, |i, j| (i + j) as f64 * 0.1), 0.1).unwrap();
        let sf = ProtocolConfig { protocol: Protocol::NOSF, ..small_cfg() };
        assert!(matches!(run_stream(&sf, &estimated, &m, &data), Err(Error::ProvenanceMismatch { .. })));
        let sl = small_cfg();
        assert!(matches!(run_stream(&sl, &inferred, &m, &data), Err(Error::ProvenanceMismatch { .. })));
        assert!(run_stream(&sf, &inferred, &m, &data).is_ok());
        assert!(run_stream(&sl, &estimated, &m, &data).is_ok());
    }

    #[test]
    fn zero_epochs_is_the_frozen_model() {
        let m = model(3);
        let data = stream(4, 40);
        let b = bank(&m, &data);
        let cfg = ProtocolConfig { n_itr: 0, ..small_cfg() };
        let ttac = run_stream(&cfg, &b, &m, &data).unwrap();
        let test = run_baseline(Method::Test, &cfg, &m, &data).unwrap();
        assert_eq!(ttac.labels(), test.labels());
        assert_eq!(test.labels(), m.predict(&data.inputs).unwrap());
        assert!(ttac.steps.is_empty());
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let m = model(5);
        let data = stream(6, 64);
        let b = bank(&m, &data);
        for method in Method::ALL {
            let a = run(method, &small_cfg(), Some(&b), &m, &data).unwrap().strip_timing();
            let c = run(method, &small_cfg(), Some(&b), &m, &data).unwrap().strip_timing();
            assert_eq!(a, c, "{method}");
        }
    }

    #[test]
    fn prefix_predictions_are_unchanged() {
        let m = model(7);
        let data = stream(8, 64);
        let b = bank(&m, &data);
        let full = run_stream(&small_cfg(), &b, &m, &data).unwrap();
        let prefix = data.subset(&(0..24).collect::<Vec<_>>());
        let part = run_stream(&small_cfg(), &b, &m, &prefix).unwrap();
        assert_eq!(part.predictions[..], full.predictions[..24]);
    }

    #[test]
    fn single_interleaved_pass_equals_one_pass() {
        let m = model(9);
        let data = stream(10, 56);
        let b = bank(&m, &data);
        let one = run_stream(&small_cfg(), &b, &m, &data).unwrap().strip_timing();
        let multi_cfg = ProtocolConfig { protocol: Protocol::NMSL, passes: 1, interleave_inference: true, ..small_cfg() };
        let mut multi = run_stream(&multi_cfg, &b, &m, &data).unwrap().strip_timing();
        multi.protocol = Protocol::NOSL;
        assert_eq!(one, multi);
    }

    #[test]
    fn evicted_ids_leave_the_ema() {
        let m = model(11);
        let data = stream(12, 64);
        let b = bank(&m, &data);
        let mut s = Session::new(Method::TtacPlusPlus, small_cfg(), m, Some(b)).unwrap();
        for batch in batches(&data, 8).unwrap() {
            s.process(&batch).unwrap();
            assert!(s.queue().len() <= 24);
            assert!(s.ema().len() <= s.queue().len());
        }
        assert_eq!(s.queue().ids(), (40..64).collect::<Vec<u64>>());
    }

    #[test]
    fn entropy_baseline_touches_only_its_scope() {
        let m = model(13);
        let data = stream(14, 32);
        let mut s = Session::new(Method::EntropyMin, small_cfg(), m.clone(), None).unwrap();
        for batch in batches(&data, 8).unwrap() {
            s.process(&batch).unwrap();
        }
        let (_, adapted) = s.finish();
        assert_eq!(adapted.backbone[0], m.backbone[0]);
        assert_ne!(adapted.head, m.head);
    }

    #[test]
    fn st_only_keeps_no_statistics() {
        let m = model(15);
        let s = Session::new(Method::StOnly, small_cfg(), m, None).unwrap();
        assert!(s.target().is_none());
    }

    #[test]
    fn adaptation_lane_publishes_snapshots() {
        let m = model(17);
        let data = stream(18, 32);
        let b = bank(&m, &data);
        let session = Session::new(Method::TtacPlusPlus, small_cfg(), m.clone(), Some(b)).unwrap();
        let lane = AdaptationLane::spawn(session);
        let mut current = Arc::new(m);
        for batch in batches(&data, 8).unwrap() {
            current.predict(&batch.inputs).unwrap();
            lane.submit(batch).unwrap();
            current = lane.wait().unwrap();
        }
        let (report, params) = lane.join().unwrap();
        assert_eq!(*current, params);
        assert_eq!(report.batches.len(), 4);
    }
}
