//! Synthetic shifted domains, source training and experiment grids.
//!
//! Source data are anisotropic Gaussian blobs, one per class, with means on
//! random directions. A target domain is drawn from the same generators and
//! then corrupted by
//!
//! ```text
//! x' = R (s * x) + severity * shift * u + severity * noise * e
//! ```
//!
//! where `R` rotates every eigen-plane of a random orthogonal basis by
//! `severity * rotation`, `s` scales each coordinate by a factor drawn from
//! `1 +/- severity * scale`, `u` is a random unit vector and `e` is standard
//! normal noise. Severity 0 is the identity.
//!
//! Rough analogues of image corruptions: additive noise for Gaussian/shot
//! noise, coordinate scaling for contrast/brightness, rotation for
//! geometric blurs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::engine::{run, Method, Protocol, ProtocolConfig, StreamReport};
use crate::filters::select_rows;
use crate::losses::StatGradient;
use crate::network::{
    backward, cross_entropy, forward, sgd_step, Architecture, ModelParams, OptimizerState,
};
use crate::source::{estimate_source_stats, infer_source_bank, InferConfig, SourceBank};
use crate::stats::CovRegularizer;
use crate::{Error, Result};

/// Corruption magnitudes per unit of severity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Corruption {
    /// Length of the translation.
    pub shift: f64,
    /// Half-width of the per-coordinate scale range around 1.
    pub scale: f64,
    /// Standard deviation of additive noise.
    pub noise: f64,
    /// Rotation angle in radians.
    pub rotation: f64,
}

impl Default for Corruption {
    fn default() -> Self {
        Self {
            shift: 1.2,
            scale: 0.1,
            noise: 0.15,
            rotation: 0.12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub dim: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    pub val_per_class: usize,
    pub target_samples: usize,
    /// Distance of class means from the origin.
    pub separation: f64,
    /// Within-class standard deviations are drawn from this range.
    pub within_std: (f64, f64),
    /// Offset added to all class means.
    pub offset: f64,
    pub corruption: Corruption,
    pub severity: u32,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            classes: 8,
            samples_per_class: 500,
            val_per_class: 100,
            target_samples: 4000,
            separation: 4.0,
            within_std: (0.5, 1.2),
            offset: 0.0,
            corruption: Corruption::default(),
            severity: 3,
            seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 1 {
            return Err(Error::InvalidArgument(format!(
                "degenerate domain: {} classes in {} dimensions",
                self.classes, self.dim
            )));
        }
        if self.samples_per_class < 2 || self.val_per_class < 1 {
            return Err(Error::InvalidArgument("too few samples per class".into()));
        }
        let (lo, hi) = self.within_std;
        if !(lo > 0.0 && hi >= lo) || self.severity > 5 {
            return Err(Error::InvalidArgument("invalid within_std or severity > 5".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_severity(&self, severity: u32) -> Self {
        Self {
            severity,
            ..self.clone()
        }
    }
}

/// Labelled source train/validation sets and the labelled, shuffled target
/// stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub target: Dataset,
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn random_orthogonal(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
    normal_matrix(rng, d, d).qr().q()
}

struct ClassGenerator {
    mean: DVector<f64>,
    /// `x = mean + factor * e`.
    factor: DMatrix<f64>,
}

impl ClassGenerator {
    fn sample(&self, rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
        let d = self.mean.len();
        let e = normal_matrix(rng, n, d);
        let mut x = e * self.factor.transpose();
        for mut row in x.row_iter_mut() {
            row += self.mean.transpose();
        }
        x
    }
}

struct CorruptionMap {
    rotation: DMatrix<f64>,
    scale: DVector<f64>,
    shift: DVector<f64>,
    noise: f64,
}

impl CorruptionMap {
    fn new(spec: &DomainSpec, rng: &mut impl Rng) -> Self {
        let d = spec.dim;
        let s = spec.severity as f64;
        let c = &spec.corruption;
        let q = random_orthogonal(rng, d);
        let theta = s * c.rotation;
        let mut block = DMatrix::identity(d, d);
        for p in 0..d / 2 {
            let (i, j) = (2 * p, 2 * p + 1);
            block[(i, i)] = theta.cos();
            block[(j, j)] = theta.cos();
            block[(i, j)] = -theta.sin();
            block[(j, i)] = theta.sin();
        }
        let rotation = &q * block * q.transpose();
        let scale = DVector::from_fn(d, |_, _| 1.0 + s * c.scale * (2.0 * rng.random::<f64>() - 1.0));
        let u = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let shift = u.normalize() * (s * c.shift);
        Self {
            rotation,
            scale,
            shift,
            noise: s * c.noise,
        }
    }

    fn apply(&self, x: &DMatrix<f64>, rng: &mut impl Rng) -> DMatrix<f64> {
        let mut scaled = x.clone();
        for mut row in scaled.row_iter_mut() {
            row.component_mul_assign(&self.scale.transpose());
        }
        let mut out = scaled * self.rotation.transpose();
        for mut row in out.row_iter_mut() {
            row += self.shift.transpose();
            if self.noise > 0.0 {
                for v in row.iter_mut() {
                    let e: f64 = StandardNormal.sample(rng);
                    *v += self.noise * e;
                }
            }
        }
        out
    }
}

fn labelled(gens: &[ClassGenerator], per_class: &[usize], rng: &mut impl Rng) -> (DMatrix<f64>, Vec<usize>) {
    let d = gens[0].mean.len();
    let total = per_class.iter().sum();
    let mut x = DMatrix::zeros(total, d);
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (k, (g, &n)) in gens.iter().zip(per_class).enumerate() {
        x.rows_mut(row, n).copy_from(&g.sample(rng, n));
        labels.extend(std::iter::repeat_n(k, n));
        row += n;
    }
    (x, labels)
}

/// Pure function of `spec`, seed included.
pub fn generate_domain(spec: &DomainSpec) -> Result<Domain> {
    spec.validate()?;
    let (d, k) = (spec.dim, spec.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gens: Vec<ClassGenerator> = (0..k)
        .map(|_| {
            let dir = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng)).normalize();
            let mean = dir * spec.separation + DVector::from_element(d, spec.offset);
            let q = random_orthogonal(&mut rng, d);
            let (lo, hi) = spec.within_std;
            let stds = DVector::from_fn(d, |_, _| lo + (hi - lo) * rng.random::<f64>());
            ClassGenerator {
                mean,
                factor: q * DMatrix::from_diagonal(&stds),
            }
        })
        .collect();
    let corruption = CorruptionMap::new(spec, &mut rng);

    let (xs, ys) = labelled(&gens, &vec![spec.samples_per_class; k], &mut rng);
    let source_train = shuffled(Dataset::new(xs, Some(ys))?, &mut rng);
    let (xv, yv) = labelled(&gens, &vec![spec.val_per_class; k], &mut rng);
    let source_val = Dataset::new(xv, Some(yv))?;

    let per_class: Vec<usize> = (0..k)
        .map(|c| spec.target_samples / k + usize::from(c < spec.target_samples % k))
        .collect();
    let (xt, yt) = labelled(&gens, &per_class, &mut rng);
    let xt = corruption.apply(&xt, &mut rng);
    let target = shuffled(Dataset::new(xt, Some(yt))?, &mut rng);
    Ok(Domain {
        source_train,
        source_val,
        target,
    })
}

fn shuffled(data: Dataset, rng: &mut impl Rng) -> Dataset {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    data.subset(&order)
}

/// Reorders a stream with a seeded shuffle.
pub fn shuffle_stream(data: &Dataset, seed: u64) -> Dataset {
    shuffled(data.clone(), &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Source training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Validation accuracy below this is an error.
    pub min_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            feature_dim: 32,
            epochs: 20,
            batch: 64,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            min_accuracy: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedSource {
    pub params: ModelParams,
    pub bank: SourceBank,
    pub val_accuracy: f64,
}

pub fn accuracy(params: &ModelParams, data: &Dataset) -> Result<f64> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("accuracy needs labels".into()))?;
    let pred = params.predict(&data.inputs)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Estimated source bank from the model's features on labelled data.
pub fn source_bank_from_model(params: &ModelParams, data: &Dataset) -> Result<SourceBank> {
    let trace = forward(params, &data.inputs)?;
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("source statistics need labels".into()))?;
    let per_class: Vec<DMatrix<f64>> = (0..params.classes())
        .map(|k| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
            select_rows(trace.features(), &idx)
        })
        .collect();
    estimate_source_stats(&per_class)
}

fn pooled_std(x: &DMatrix<f64>) -> f64 {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Cross-entropy training with SGD + momentum, followed by source
/// statistics on the final features of the training set.
pub fn train_source(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainedSource> {
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("source training needs labels".into()))?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let arch = Architecture {
        input_dim: train.dim(),
        hidden: cfg.hidden.clone(),
        feature_dim: cfg.feature_dim,
        classes,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(&arch, &mut rng)?;
    params.input_std = pooled_std(&train.inputs);
    let mut opt = OptimizerState::new(&params, cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let x = select_rows(&train.inputs, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let trace = forward(&params, &x)?;
            let (loss, gl) = cross_entropy(&trace, &y, None)?;
            total += loss * chunk.len() as f64;
            let g = backward(&params, &trace, None, Some(&gl))?;
            sgd_step(&mut params, &g, &mut opt)?;
        }
        log::debug!("source epoch {epoch}: loss {:.4}", total / train.len() as f64);
    }
    let val_accuracy = accuracy(&params, val)?;
    info!("source validation accuracy {val_accuracy:.4}");
    if val_accuracy < cfg.min_accuracy {
        return Err(Error::SourceTraining {
            accuracy: val_accuracy,
            required: cfg.min_accuracy,
        });
    }
    let bank = source_bank_from_model(&params, train)?;
    Ok(TrainedSource {
        params,
        bank,
        val_accuracy,
    })
}

/// Stream settings for the default benchmark: queue of 3 batches of 256,
/// four epochs per batch. The relative covariance floor is raised because
/// ReLU features leave per-class covariances singular, and the statistics
/// gradient flows through the means only.
pub fn default_protocol() -> ProtocolConfig {
    ProtocolConfig {
        n_b: 256,
        n_c: 768,
        n_itr: 4,
        n_clip_k: 256,
        lr: 7e-4,
        regularizer: CovRegularizer {
            relative: 0.1,
            floor: 1e-8,
        },
        stat_gradient: StatGradient::MeanOnly,
        ..ProtocolConfig::default()
    }
}

/// Trained source model and domain for one (spec, seed).
#[derive(Debug, Clone)]
pub struct Prepared {
    pub domain: Domain,
    pub source: TrainedSource,
}

pub fn prepare(spec: &DomainSpec, train: &TrainConfig) -> Result<Prepared> {
    let domain = generate_domain(spec)?;
    let train = TrainConfig {
        seed: spec.seed,
        ..train.clone()
    };
    let source = train_source(&domain.source_train, &domain.source_val, &train)?;
    Ok(Prepared { domain, source })
}

/// Runs one method/protocol on a prepared domain. TTAC++ under a
/// source-free protocol infers its bank from the head.
pub fn run_prepared(
    prepared: &Prepared,
    method: Method,
    cfg: &ProtocolConfig,
    infer: &InferConfig,
) -> Result<StreamReport> {
    let model = &prepared.source.params;
    let stream = &prepared.domain.target;
    if method == Method::TtacPlusPlus && cfg.protocol.source_free() {
        let (bank, _) = infer_source_bank(model, infer)?;
        run(method, cfg, Some(&bank), model, stream)
    } else {
        run(method, cfg, Some(&prepared.source.bank), model, stream)
    }
}

/// One grid cell: a method under a protocol on a domain, repeated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    #[serde(default)]
    pub name: Option<String>,
    pub method: Method,
    pub protocol: Protocol,
    #[serde(default)]
    pub domain: DomainSpec,
    pub seeds: Vec<u64>,
    /// Partial `ProtocolConfig` JSON merged over the grid's base config.
    #[serde(default)]
    pub overrides: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub cells: Vec<GridCell>,
    #[serde(default = "default_protocol")]
    pub base: ProtocolConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub infer: InferConfig,
}

impl ExperimentGrid {
    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl GridCell {
    /// Base config with this cell's protocol, overrides and `seed`.
    pub fn config(&self, base: &ProtocolConfig, seed: u64) -> Result<ProtocolConfig> {
        let mut value = serde_json::to_value(base)?;
        let obj = value.as_object_mut().expect("config serializes to an object");
        for (k, v) in &self.overrides {
            if !obj.contains_key(k) {
                return Err(Error::InvalidArgument(format!("unknown override key {k:?}")));
            }
            obj.insert(k.clone(), v.clone());
        }
        let mut cfg: ProtocolConfig = serde_json::from_value(value)?;
        cfg.protocol = self.protocol;
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable content hash over the cell and everything it depends on.
    pub fn hash(&self, grid: &ExperimentGrid) -> Result<String> {
        let key = serde_json::json!({
            "cell": self,
            "base": grid.base,
            "train": grid.train,
            "infer": grid.infer,
        });
        let digest = Sha256::digest(serde_json::to_vec(&key)?);
        Ok(hex::encode(&digest[..8]))
    }
}

/// Aggregated result of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub hash: String,
    pub name: Option<String>,
    pub method: Method,
    pub protocol: Protocol,
    pub severity: u32,
    pub seeds: Vec<u64>,
    /// Final error per seed, in seed order (failed seeds omitted).
    pub errors: Vec<f64>,
    pub mean_error: Option<f64>,
    pub std_error: Option<f64>,
    pub median_error: Option<f64>,
    /// Mean fraction of queue samples admitted to cluster updates.
    pub mean_acceptance: Option<f64>,
    /// Cumulative-error curve per seed, relative to the output directory.
    pub curves: Vec<String>,
    pub failures: Vec<String>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    Some((m, var.sqrt()))
}

type PreparedCache = BTreeMap<(String, u64), std::result::Result<Prepared, String>>;

/// Runs every (cell, seed) in parallel. Source models are trained once per
/// (domain, seed). Failures are recorded per cell and do not stop the grid.
/// With `out_dir`, writes `results.csv`, `results.json` and per-seed curves
/// under `curves/`.
pub fn run_grid(grid: &ExperimentGrid, out_dir: Option<&Path>) -> Result<Vec<CellResult>> {
    let mut keys: Vec<(String, DomainSpec, u64)> = Vec::new();
    for cell in &grid.cells {
        let dkey = serde_json::to_string(&cell.domain)?;
        for &seed in &cell.seeds {
            if !keys.iter().any(|(k, _, s)| *k == dkey && *s == seed) {
                keys.push((dkey.clone(), cell.domain.clone(), seed));
            }
        }
    }
    let cache: PreparedCache = keys
        .par_iter()
        .map(|(k, spec, seed)| {
            let p = prepare(&spec.with_seed(*seed), &grid.train).map_err(|e| e.to_string());
            ((k.clone(), *seed), p)
        })
        .collect();

    let jobs: Vec<(usize, u64)> = grid
        .cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let outcomes: Vec<std::result::Result<StreamReport, String>> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let cell = &grid.cells[i];
            let key = (serde_json::to_string(&cell.domain).map_err(|e| e.to_string())?, seed);
            let prepared = cache[&key].as_ref().map_err(Clone::clone)?;
            let cfg = cell.config(&grid.base, seed).map_err(|e| e.to_string())?;
            run_prepared(prepared, cell.method, &cfg, &grid.infer).map_err(|e| e.to_string())
        })
        .collect();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("curves")).map_err(|e| Error::io(dir, e))?;
    }
    let mut results = Vec::with_capacity(grid.cells.len());
    for (i, cell) in grid.cells.iter().enumerate() {
        let hash = cell.hash(grid)?;
        let mut errors = Vec::new();
        let mut acceptance = Vec::new();
        let mut curves = Vec::new();
        let mut failures = Vec::new();
        for ((_, seed), outcome) in jobs.iter().zip(&outcomes).filter(|((c, _), _)| *c == i) {
            match outcome {
                Ok(report) => {
                    if let Some(e) = report.final_error {
                        errors.push(e);
                    }
                    if !report.steps.is_empty() {
                        acceptance.push(report.mean_rates().cluster);
                    }
                    if let Some(dir) = out_dir {
                        let rel = PathBuf::from("curves").join(format!("{hash}_seed{seed}.csv"));
                        let path = dir.join(&rel);
                        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                        report.write_cumulative_csv(std::io::BufWriter::new(f))?;
                        curves.push(rel.to_string_lossy().into_owned());
                    }
                }
                Err(msg) => {
                    warn!("cell {hash} seed {seed} failed: {msg}");
                    failures.push(format!("seed {seed}: {msg}"));
                }
            }
        }
        let ms = mean_std(&errors);
        results.push(CellResult {
            hash,
            name: cell.name.clone(),
            method: cell.method,
            protocol: cell.protocol,
            severity: cell.domain.severity,
            seeds: cell.seeds.clone(),
            mean_error: ms.map(|m| m.0),
            std_error: ms.map(|m| m.1),
            median_error: median(&errors),
            mean_acceptance: mean_std(&acceptance).map(|m| m.0),
            errors,
            curves,
            failures,
        });
    }
    if let Some(dir) = out_dir {
        write_results(dir, &results)?;
    }
    Ok(results)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn write_results(dir: &Path, results: &[CellResult]) -> Result<()> {
    let path = dir.join("results.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "hash",
        "name",
        "method",
        "protocol",
        "severity",
        "seeds",
        "mean_error",
        "std_error",
        "median_error",
        "mean_acceptance",
        "curves",
        "failures",
    ])?;
    for r in results {
        w.write_record([
            r.hash.clone(),
            r.name.clone().unwrap_or_default(),
            r.method.to_string(),
            r.protocol.to_string(),
            r.severity.to_string(),
            r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
            opt(r.mean_error),
            opt(r.std_error),
            opt(r.median_error),
            opt(r.mean_acceptance),
            r.curves.join(";"),
            r.failures.join(";"),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join("results.json");
    std::fs::write(&path, serde_json::to_string_pretty(results)?).map_err(|e| Error::io(&path, e))
}

/// Reads a grid output directory and writes `report.csv` (one summary row
/// per cell, percent units) and `cumulative_error.dat` (one gnuplot data
/// block per curve, separated by two blank lines).
pub fn report(dir: &Path) -> Result<Vec<CellResult>> {
    let path = dir.join("results.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let results: Vec<CellResult> = serde_json::from_str(&text)?;

    let path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["cell", "method", "protocol", "severity", "error_pct", "std_pct", "median_pct", "n"])?;
    for r in &results {
        let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_default();
        w.write_record([
            r.name.clone().unwrap_or_else(|| r.hash.clone()),
            r.method.to_string(),
            r.protocol.to_string(),
            r.severity.to_string(),
            pct(r.mean_error),
            pct(r.std_error),
            pct(r.median_error),
            r.errors.len().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let mut dat = String::from("# arrival cumulative_error\n");
    for r in &results {
        for curve in &r.curves {
            let path = dir.join(curve);
            let mut rd = csv::Reader::from_path(&path)?;
            dat.push_str(&format!(
                "# {} {} {} {}\n",
                r.name.as_deref().unwrap_or(&r.hash),
                r.method,
                r.protocol,
                curve
            ));
            for rec in rd.records() {
                let rec = rec?;
                dat.push_str(&format!("{} {}\n", &rec[0], &rec[1]));
            }
            dat.push_str("\n\n");
        }
    }
    let path = dir.join("cumulative_error.dat");
    std::fs::write(&path, dat).map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

/// Writes a generated domain as `source_train.csv`, `source_val.csv` and
/// `target.csv`.
pub fn write_domain(domain: &Domain, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    domain.source_train.save_csv(&dir.join("source_train.csv"))?;
    domain.source_val.save_csv(&dir.join("source_val.csv"))?;
    domain.target.save_csv(&dir.join("target.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{batch_moments, merge_mixture};

    fn small_spec() -> DomainSpec {
        DomainSpec {
            dim: 6,
            classes: 3,
            samples_per_class: 120,
            val_per_class: 40,
            target_samples: 240,
            ..Default::default()
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        assert!(generate_domain(&DomainSpec { classes: 1, ..small_spec() }).is_err());
        assert!(generate_domain(&DomainSpec { dim: 0, ..small_spec() }).is_err());
        assert!(generate_domain(&DomainSpec { severity: 6, ..small_spec() }).is_err());
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_domain(&small_spec()).unwrap();
        let b = generate_domain(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_domain(&small_spec().with_seed(1)).unwrap();
        assert_ne!(a.target, c.target);
    }

    #[test]
    fn severity_zero_matches_source_distribution() {
        let spec = DomainSpec { severity: 0, target_samples: 3000, samples_per_class: 1000, ..small_spec() };
        let d = generate_domain(&spec).unwrap();
        let s = batch_moments(&d.source_train.inputs).unwrap();
        let t = batch_moments(&d.target.inputs).unwrap();
        for j in 0..spec.dim {
            let se = (s.cov[(j, j)] / d.source_train.len() as f64 + t.cov[(j, j)] / d.target.len() as f64).sqrt();
            assert!((s.mean[j] - t.mean[j]).abs() < 3.0 * se, "coordinate {j}");
        }
    }

    #[test]
    fn target_is_balanced_and_shuffled() {
        let d = generate_domain(&DomainSpec { target_samples: 241, ..small_spec() }).unwrap();
        let labels = d.target.labels.unwrap();
        let counts: Vec<usize> = (0..3).map(|k| labels.iter().filter(|&&y| y == k).count()).collect();
        assert_eq!(counts, vec![81, 80, 80]);
        assert!(labels.windows(2).any(|w| w[0] != w[1]) && labels[..80].iter().any(|&y| y != 0));
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let spec = DomainSpec { separation: 8.0, ..small_spec() };
        let d = generate_domain(&spec).unwrap();
        let cfg = TrainConfig { hidden: vec![16], feature_dim: 8, epochs: 10, ..Default::default() };
        let t = train_source(&d.source_train, &d.source_val, &cfg).unwrap();
        assert!(t.val_accuracy >= 0.99, "{}", t.val_accuracy);
        // statistics are a deterministic function of the weights
        let again = source_bank_from_model(&t.params, &d.source_train).unwrap();
        assert_eq!(again, t.bank);
        let merged = merge_mixture(&t.bank.classes, &t.bank.weights).unwrap();
        assert!((merged.mean - &t.bank.global.mean).amax() < 1e-9);
        assert!((merged.cov - &t.bank.global.cov).amax() < 1e-9);
    }

    #[test]
    fn unlearnable_source_is_an_error() {
        let spec = DomainSpec { separation: 0.0, ..small_spec() };
        let d = generate_domain(&spec).unwrap();
        let cfg = TrainConfig { hidden: vec![8], feature_dim: 4, epochs: 2, ..Default::default() };
        assert!(matches!(
            train_source(&d.source_train, &d.source_val, &cfg),
            Err(Error::SourceTraining { .. })
        ));
    }

    #[test]
    fn median_and_spread() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn overrides_merge_and_reject_unknown_keys() {
        let mut cell = GridCell {
            name: None,
            method: Method::TtacPlusPlus,
            protocol: Protocol::NMSL,
            domain: small_spec(),
            seeds: vec![0],
            overrides: serde_json::from_str(r#"{"lambda2": 0.0, "n_itr": 2}"#).unwrap(),
        };
        let cfg = cell.config(&default_protocol(), 7).unwrap();
        assert_eq!((cfg.lambda2, cfg.n_itr, cfg.seed, cfg.protocol), (0.0, 2, 7, Protocol::NMSL));
        assert_eq!(cfg.n_b, 256);
        cell.overrides.insert("bogus".into(), 1.into());
        assert!(cell.config(&default_protocol(), 0).is_err());
    }
}
