use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use ttac::bench::{self, DomainSpec, ExperimentGrid, TrainConfig};
use ttac::data::Dataset;
use ttac::engine::{run, run_baseline, Method, Protocol, ProtocolConfig, StreamReport};
use ttac::network::ModelParams;
use ttac::source::{infer_source_bank, GammaRule, InferConfig, SourceBank};
use ttac::{Error, Result};

#[derive(Parser)]
#[command(name = "ttac", version, about = "Streaming test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run TTAC++ over a stream under a protocol.
    Adapt(AdaptArgs),
    /// Run a baseline adapter (TEST, ENTROPY_MIN, ST_ONLY) over a stream.
    Baseline(BaselineArgs),
    /// Infer a source bank from the classifier head of a checkpoint.
    InferSource(InferArgs),
    /// Train a source model on a labelled table and estimate its source bank.
    TrainSource(TrainArgs),
    /// Synthetic benchmark tools.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
}

#[derive(Args)]
struct StreamArgs {
    /// Model checkpoint (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Sample table to stream, in file order.
    #[arg(long)]
    stream: PathBuf,
    /// Protocol config (JSON); missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for report.json, cumulative_error.csv and predictions.csv.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    stream: StreamArgs,
    /// N-O-SL, N-O-SF, N-M-SL or N-M-SF; overrides the config.
    #[arg(long)]
    protocol: Option<Protocol>,
    /// Source bank (JSON) for the anchors.
    #[arg(long, conflicts_with = "infer_source", required_unless_present = "infer_source")]
    source_stats: Option<PathBuf>,
    /// Infer the anchors from the checkpoint's classifier head.
    #[arg(long)]
    infer_source: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    stream: StreamArgs,
    #[arg(long, default_value = "TEST")]
    method: Method,
    /// Only the pass structure (N-O vs N-M) matters for baselines.
    #[arg(long)]
    protocol: Option<Protocol>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output source bank (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// gamma = largest eigenvalue of the mean spread / divisor.
    #[arg(long, conflicts_with = "gamma")]
    gamma_divisor: Option<f64>,
    /// Fixed gamma.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Labelled training table.
    #[arg(long)]
    train: PathBuf,
    /// Labelled validation table; defaults to the training table.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Training config (JSON); missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint (JSON).
    #[arg(long)]
    out_model: PathBuf,
    /// Output source bank estimated from the training features (JSON).
    #[arg(long)]
    out_stats: PathBuf,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Generate a domain and write its tables.
    Gen {
        /// Domain spec (JSON); defaults to the built-in benchmark.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment grid.
    Run {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a grid output directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn load_config(args: &StreamArgs, protocol: Option<Protocol>) -> Result<ProtocolConfig> {
    let mut cfg = match &args.config {
        Some(p) => ProtocolConfig::load_json(p)?,
        None => ProtocolConfig::default(),
    };
    if let Some(p) = protocol {
        cfg.protocol = p;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_outputs(report: &StreamReport, dir: &Path) -> Result<()> {
    report.write_dir(dir)?;
    match report.final_error {
        Some(e) => println!(
            "{} {}: {} predictions, final error {:.2}%",
            report.method,
            report.protocol,
            report.predictions.len(),
            100.0 * e
        ),
        None => println!("{} {}: {} predictions", report.method, report.protocol, report.predictions.len()),
    }
    Ok(())
}

fn adapt(args: &AdaptArgs) -> Result<()> {
    let cfg = load_config(&args.stream, args.protocol)?;
    let model = ModelParams::load_json(&args.stream.model)?;
    let stream = Dataset::load_csv(&args.stream.stream)?;
    let bank = match &args.source_stats {
        Some(p) => SourceBank::load_json(p)?,
        None => {
            let cfg = InferConfig {
                seed: cfg.seed,
                ..InferConfig::default()
            };
            let (bank, outcome) = infer_source_bank(&model, &cfg)?;
            info!("inferred source bank after {} iterations", outcome.iterations);
            bank
        }
    };
    let report = run(Method::TtacPlusPlus, &cfg, Some(&bank), &model, &stream)?;
    write_outputs(&report, &args.stream.out)
}

fn baseline(args: &BaselineArgs) -> Result<()> {
    let cfg = load_config(&args.stream, args.protocol)?;
    let model = ModelParams::load_json(&args.stream.model)?;
    let stream = Dataset::load_csv(&args.stream.stream)?;
    let report = run_baseline(args.method, &cfg, &model, &stream)?;
    write_outputs(&report, &args.stream.out)
}

fn infer_source(args: &InferArgs) -> Result<()> {
    let model = ModelParams::load_json(&args.model)?;
    let mut cfg = InferConfig {
        seed: args.seed,
        ..InferConfig::default()
    };
    if let Some(g) = args.gamma {
        cfg.gamma = GammaRule::Fixed(g);
    } else if let Some(divisor) = args.gamma_divisor {
        cfg.gamma = GammaRule::MeanSpread { divisor };
    }
    let (bank, outcome) = infer_source_bank(&model, &cfg)?;
    bank.save_json(&args.out)?;
    let consistent = outcome.self_consistent.iter().filter(|&&b| b).count();
    println!(
        "inferred {} class means in {} iterations; self-consistent {consistent}/{}",
        bank.k(),
        outcome.iterations,
        bank.k()
    );
    Ok(())
}

fn train_source(args: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let train = Dataset::load_csv(&args.train)?;
    let val = match &args.val {
        Some(p) => Dataset::load_csv(p)?,
        None => train.clone(),
    };
    let trained = bench::train_source(&train, &val, &cfg)?;
    trained.params.save_json(&args.out_model)?;
    trained.bank.save_json(&args.out_stats)?;
    println!("validation accuracy {:.2}%", 100.0 * trained.val_accuracy);
    Ok(())
}

fn bench_command(cmd: &BenchCommand) -> Result<()> {
    match cmd {
        BenchCommand::Gen { spec, seed, out } => {
            let mut spec: DomainSpec = match spec {
                Some(p) => read_json(p)?,
                None => DomainSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = *s;
            }
            let domain = bench::generate_domain(&spec)?;
            bench::write_domain(&domain, out)?;
            write_json(&out.join("spec.json"), &spec)?;
            println!(
                "wrote {} source, {} validation and {} target samples to {}",
                domain.source_train.len(),
                domain.source_val.len(),
                domain.target.len(),
                out.display()
            );
        }
        BenchCommand::Run { grid, out } => {
            let grid = ExperimentGrid::load_json(grid)?;
            let results = bench::run_grid(&grid, Some(out))?;
            for r in &results {
                let name = r.name.as_deref().unwrap_or(&r.hash);
                match r.median_error {
                    Some(e) => println!("{name}: {} {} median error {:.2}%", r.method, r.protocol, 100.0 * e),
                    None => println!("{name}: {} {} failed", r.method, r.protocol),
                }
            }
        }
        BenchCommand::Report { input } => {
            let results = bench::report(input)?;
            println!("summarised {} cells into {}", results.len(), input.join("report.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Adapt(a) => adapt(a),
        Command::Baseline(a) => baseline(a),
        Command::InferSource(a) => infer_source(a),
        Command::TrainSource(a) => train_source(a),
        Command::Bench { command } => bench_command(command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
