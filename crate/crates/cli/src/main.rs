//! `needletrack`: generate, calibrate, train, eval, predict, bench.
//!
//! Exit status is 0 on success, 1 on a command-line usage error and 2 when
//! data or configuration is rejected. Diagnostics go to standard error.

mod config;

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use needle_core::calibrate::{pivot_calibrate, poses_from_records, PoseRecord};
use needle_core::harness::{
    benchmark_inference, config_digest, evaluate, split_dataset, train_with_progress,
    LatencyReport, MetricsReport, TipPredictor, TipTracker,
};
use needle_core::io;
use needle_core::simulate::{generate_dataset, OpticsConfig, SampleRecord};
use needle_core::{Dataset, Network, NetworkConfig, Tensor};
use serde::Serialize;

use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<needle_core::Error> for CliError {
    fn from(e: needle_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "needletrack", version, about = "Optical needle-tip tracking pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Accepted both before and after the subcommand; later `--set`s win.
#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn merge(mut self, later: Common) -> Common {
        self.config = later.config.or(self.config);
        self.overrides.extend(later.overrides);
        self
    }
}

#[derive(Args)]
struct Plain {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PredictArgs {
    /// PNG or raw `.ntwt` frame.
    image: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset into `paths.dataset`.
    Generate(Plain),
    /// Pivot-calibrate a tracked sensor from the pose list at `paths.poses`.
    Calibrate(Plain),
    /// Train on the training split of `paths.dataset`.
    Train(Plain),
    /// Evaluate the trained model on the test split.
    Eval(Plain),
    /// Print the predicted tip position (cm) for one frame.
    Predict(PredictArgs),
    /// Time preprocessing and inference at each of `bench.sides`.
    Bench(Plain),
    /// Print the resolved configuration as JSON.
    ShowConfig(Plain),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate(a)
            | Command::Calibrate(a)
            | Command::Train(a)
            | Command::Eval(a)
            | Command::Bench(a)
            | Command::ShowConfig(a) => &a.common,
            Command::Predict(a) => &a.common,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let common = cli.common.merge(cli.command.common().clone());
    let result = ExperimentConfig::resolve(common.config.as_deref(), &common.overrides)
        .and_then(|cfg| run(cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 1,
                CliError::Data(_) => 2,
            })
        }
    }
}

fn run(command: Command, cfg: &ExperimentConfig) -> CliResult {
    match command {
        Command::Generate(_) => generate(cfg),
        Command::Calibrate(_) => calibrate(cfg),
        Command::Train(_) => train(cfg),
        Command::Eval(_) => eval(cfg),
        Command::Predict(a) => predict(cfg, &a.image),
        Command::Bench(_) => bench(cfg),
        Command::ShowConfig(_) => {
            println!("{}", serde_json::to_string_pretty(cfg).expect("config serializes"));
            Ok(())
        }
    }
}

fn generate(cfg: &ExperimentConfig) -> CliResult {
    let records = generate_dataset(cfg.dataset.n, &cfg.optics, &cfg.normalization, cfg.seed)?;
    let dataset = Dataset {
        optics: cfg.optics.clone(),
        normalization: cfg.normalization.clone(),
        records,
    };
    io::write_dataset(&cfg.paths.dataset, &dataset, cfg.dataset.raw_sidecar)?;
    eprintln!(
        "wrote {} frames ({}x{}) to {}",
        cfg.dataset.n,
        cfg.optics.image_side,
        cfg.optics.image_side,
        cfg.paths.dataset.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct CalibrationReport {
    tip_offset_cm: [f64; 3],
    pivot_point_cm: [f64; 3],
    rms_residual_cm: f64,
    condition_number: f64,
    n_poses: usize,
}

fn calibrate(cfg: &ExperimentConfig) -> CliResult {
    let records: Vec<PoseRecord> = io::read_json(&cfg.paths.poses)?;
    let poses = poses_from_records(&records)
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg.paths.poses.display())))?;
    let cal = pivot_calibrate(&poses, cfg.calibration.min_poses)?;
    let report = CalibrationReport {
        tip_offset_cm: cal.tip_offset.into(),
        pivot_point_cm: cal.pivot_point.into(),
        rms_residual_cm: cal.rms_residual,
        condition_number: cal.condition_number,
        n_poses: poses.len(),
    };
    io::write_json(&cfg.paths.calibration, &report)?;
    eprintln!(
        "tip offset ({:.4}, {:.4}, {:.4}) cm, rms residual {:.3e} cm",
        report.tip_offset_cm[0],
        report.tip_offset_cm[1],
        report.tip_offset_cm[2],
        report.rms_residual_cm
    );
    Ok(())
}

/// Loads the dataset and splits it with the experiment seed.
fn load_split(cfg: &ExperimentConfig) -> CliResult<(Dataset, Vec<SampleRecord>, Vec<SampleRecord>)> {
    let dataset = io::read_dataset(&cfg.paths.dataset)?;
    let side = dataset.optics.image_side;
    if side != cfg.network.input_side {
        return Err(CliError::Data(format!(
            "config key `network.input_side` is {} but {} holds {side}x{side} frames",
            cfg.network.input_side,
            cfg.paths.dataset.display()
        )));
    }
    let (train, test) = split_dataset(&dataset.records, cfg.train.split_ratio, cfg.seed)?;
    Ok((dataset, train, test))
}

fn create_parent(path: &Path) -> CliResult {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        None => Ok(()),
    }
}

fn train(cfg: &ExperimentConfig) -> CliResult {
    let (dataset, train_set, _) = load_split(cfg)?;
    create_parent(&cfg.paths.weights)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    train_cfg.checkpoint = Some(cfg.paths.weights.clone());

    let epochs = train_cfg.epochs;
    let every = (epochs / 20).max(1);
    let out = train_with_progress(
        &train_set,
        &cfg.normalization,
        dataset.optics.max_count,
        &train_cfg,
        &cfg.network,
        |epoch, loss| {
            if (epoch + 1) % every == 0 || epoch + 1 == epochs {
                eprintln!("epoch {:>4}/{epochs}  train_mse {loss:.6}", epoch + 1);
            }
        },
    )?;

    out.tracker
        .save(&cfg.paths.weights, &cfg.paths.model, &config_digest(cfg))?;
    write_loss_csv(&cfg.paths.loss_csv, &out.history)?;
    eprintln!(
        "trained on {} frames; weights in {}",
        train_set.len(),
        cfg.paths.weights.display()
    );
    Ok(())
}

fn write_loss_csv(path: &Path, history: &[f64]) -> CliResult {
    create_parent(path)?;
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "epoch,train_mse")?;
        for (i, loss) in history.iter().enumerate() {
            writeln!(w, "{},{loss}", i + 1)?;
        }
        w.flush()
    };
    write().map_err(|e| io_err(path, e))
}

fn eval(cfg: &ExperimentConfig) -> CliResult {
    let tracker = TipTracker::load(&cfg.paths.weights, &cfg.paths.model)?;
    let (_, _, test_set) = load_split(cfg)?;
    let metrics = evaluate(&tracker, &test_set, &cfg.normalization)?;
    io::write_json(&cfg.paths.metrics, &MetricsReport::new(&metrics, config_digest(cfg)))?;
    print!("{}", metrics.table());
    Ok(())
}

fn predict(cfg: &ExperimentConfig, image: &Path) -> CliResult {
    let tracker = TipTracker::load(&cfg.paths.weights, &cfg.paths.model)?;
    let frame: Tensor<f32> = match image.extension().and_then(|e| e.to_str()) {
        Some("ntwt") => io::read_raw_image(image)?,
        _ => io::read_png(image)?,
    };
    let p = tracker.predict(&frame)?;
    println!("{:.4} {:.4} {:.4}", p.x, p.y, p.z);
    Ok(())
}

#[derive(Serialize)]
struct LatencyFile {
    reference_ms: f64,
    reports: Vec<LatencyReport>,
}

fn bench(cfg: &ExperimentConfig) -> CliResult {
    let mut reports = Vec::with_capacity(cfg.bench.sides.len());
    for &side in &cfg.bench.sides {
        let network = NetworkConfig {
            input_side: side,
            ..cfg.network.clone()
        };
        let optics = OpticsConfig {
            image_side: side,
            ..cfg.optics.clone()
        };
        let tracker = TipTracker {
            network: Network::build(network, cfg.seed)?,
            normalization: cfg.normalization.clone(),
            max_count: optics.max_count,
        };
        let report = benchmark_inference(&tracker, &optics, cfg.bench.n_runs, cfg.bench.warmup)?;
        println!("{}", report.summary());
        reports.push(report);
    }
    let file = LatencyFile {
        reference_ms: needle_core::harness::REFERENCE_LATENCY_MS,
        reports,
    };
    io::write_json(&cfg.paths.latency, &file)?;
    Ok(())
}
