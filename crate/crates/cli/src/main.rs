//! `pa`: train, quantize, evaluate, analyze, and bench piecewise-quantized
//! binary networks.

mod analyze;
mod bench;
mod hist;
mod paq;
mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pa_core::complexity::{ReportFormat, SchemeSpec};
use pa_core::net::optim::OptimKind;
use pa_core::net::train::TrainConfig;

use run::{
    Action, CliError, CliResult, DatasetKind, OptimizerChoice, RunConfig, SchemeKind,
    SchemeSettings, Split,
};

#[derive(Parser)]
#[command(name = "pa", version, about = "Piecewise-quantized binary network toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes a checkpoint and JSON-lines metrics.
    Train(TrainArgs),
    /// Export a trained checkpoint as a self-contained quantized model.
    Quantize(QuantizeArgs),
    /// Measure accuracy of a checkpoint or quantized export.
    Eval(EvalArgs),
    /// Analytic memory and compute reports.
    Analyze(AnalyzeArgs),
    /// Machine-local kernel timings as CSV.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct SchemeArgs {
    /// Quantization scheme for interior layers.
    #[arg(long, value_enum)]
    scheme: Option<SchemeKind>,
    /// Weight pieces per quantized layer (even).
    #[arg(long = "M", default_value_t = 8)]
    m: usize,
    /// Activation pieces per quantized layer.
    #[arg(long = "N", default_value_t = 7)]
    n: usize,
    /// Weight gradient scale.
    #[arg(long, default_value_t = 1.0)]
    lambda_w: f32,
    /// Activation gradient scale.
    #[arg(long, default_value_t = 1.0)]
    lambda_a: f32,
    /// Top-piece half-width for activations; calibrated when omitted.
    #[arg(long)]
    lambda_delta: Option<f32>,
}

impl SchemeArgs {
    fn settings(&self, default: Option<SchemeKind>) -> Option<SchemeSettings> {
        self.scheme.or(default).map(|kind| SchemeSettings {
            kind,
            m: self.m,
            n: self.n,
            lambda_w: self.lambda_w,
            lambda_a: self.lambda_a,
            lambda_delta: self.lambda_delta,
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Architecture id (lenet, resnet20).
    #[arg(long)]
    arch: String,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Dataset layout under --data; inferred from --arch when omitted.
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Initial learning rate.
    #[arg(long, default_value_t = 0.01)]
    eta: f32,
    /// Per-epoch learning-rate multiplier.
    #[arg(long, default_value_t = 0.95)]
    decay: f32,
    #[arg(long, value_enum, default_value_t = OptimizerChoice::Sgd)]
    optimizer: OptimizerChoice,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f32,
    /// Random horizontal flips and shifts on training batches.
    #[arg(long)]
    augment: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap on training samples (0 = all).
    #[arg(long, default_value_t = 0)]
    limit_train: usize,
    /// Cap on test samples (0 = all).
    #[arg(long, default_value_t = 0)]
    limit_test: usize,
    /// Warm-start checkpoint; every matching tensor is loaded.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value = "model.pack")]
    out: PathBuf,
    #[arg(long, default_value = "metrics.jsonl")]
    metrics: PathBuf,
    /// Batch size for test-set evaluation.
    #[arg(long, default_value_t = 256)]
    eval_batch: usize,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Trained checkpoint to export.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Architecture id the checkpoint was trained with.
    #[arg(long)]
    arch: String,
    #[command(flatten)]
    scheme: SchemeArgs,
    /// Training data directory, needed only to calibrate activation
    /// quantizers missing from the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    /// Calibration sample count.
    #[arg(long, default_value_t = 256)]
    calibrate: usize,
    #[arg(long, default_value = "model.paq")]
    out: PathBuf,
    /// Write dense-vs-quantized weight histograms as CSV.
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Model file: training checkpoint (.pack) or quantized export (.paq).
    #[arg(long)]
    model: PathBuf,
    /// Architecture id; required for checkpoints, read from exports.
    #[arg(long)]
    arch: Option<String>,
    #[command(flatten)]
    scheme: SchemeArgs,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Re-run every batch through the bit-kernel path and compare.
    #[arg(long)]
    verify: bool,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    /// Cap on evaluated samples (0 = all).
    #[arg(long, default_value_t = 0)]
    limit: usize,
    /// Write a JSON accuracy report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Architecture id (lenet, resnet20, resnet18, resnet34, resnet50).
    #[arg(long)]
    arch: String,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long, value_enum, default_value_t = FormatChoice::Text)]
    format: FormatChoice,
    #[arg(long)]
    out: Option<PathBuf>,
    /// All schemes side by side.
    #[arg(long)]
    compare: bool,
    /// Also print latency closed forms at this accumulation length.
    #[arg(long)]
    latency: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum FormatChoice {
    Text,
    Json,
    Csv,
}

impl From<FormatChoice> for ReportFormat {
    fn from(f: FormatChoice) -> Self {
        match f {
            FormatChoice::Text => ReportFormat::Text,
            FormatChoice::Json => ReportFormat::Json,
            FormatChoice::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Timing repetitions per kernel.
    #[arg(long, default_value_t = 7)]
    iters: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn optim_kind(choice: OptimizerChoice) -> OptimKind {
    match choice {
        OptimizerChoice::Sgd => OptimKind::sgd(),
        OptimizerChoice::Adam => OptimKind::adam(),
    }
}

fn base_config(action: Action) -> RunConfig {
    RunConfig {
        action,
        arch: None,
        scheme: None,
        dataset: None,
        data_dir: None,
        checkpoint: None,
        train: TrainConfig::default(),
        limit_train: 0,
        limit_test: 0,
        calibrate: 256,
        out: None,
        metrics: None,
        histogram: None,
        split: Split::Test,
        verify: false,
    }
}

fn lower_train(a: TrainArgs) -> RunConfig {
    RunConfig {
        arch: Some(a.arch),
        scheme: a.scheme.settings(Some(SchemeKind::Pa)),
        dataset: a.dataset,
        data_dir: Some(a.data),
        checkpoint: a.init,
        train: TrainConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            eta: a.eta,
            decay: a.decay,
            optimizer: optim_kind(a.optimizer),
            weight_decay: a.weight_decay,
            seed: a.seed,
            augment: a.augment,
            eval_batch: a.eval_batch,
        },
        limit_train: a.limit_train,
        limit_test: a.limit_test,
        out: Some(a.out),
        metrics: Some(a.metrics),
        ..base_config(Action::Train)
    }
}

fn lower_quantize(a: QuantizeArgs) -> RunConfig {
    RunConfig {
        arch: Some(a.arch),
        scheme: a.scheme.settings(None),
        dataset: a.dataset,
        data_dir: a.data,
        checkpoint: Some(a.checkpoint),
        train: TrainConfig {
            seed: a.seed,
            ..TrainConfig::default()
        },
        calibrate: a.calibrate,
        out: Some(a.out),
        histogram: a.histogram,
        ..base_config(Action::Quantize)
    }
}

fn lower_eval(a: EvalArgs) -> RunConfig {
    RunConfig {
        arch: a.arch,
        scheme: a.scheme.settings(None),
        dataset: a.dataset,
        data_dir: Some(a.data),
        checkpoint: Some(a.model),
        train: TrainConfig {
            seed: a.seed,
            eval_batch: a.batch,
            ..TrainConfig::default()
        },
        limit_train: a.limit,
        limit_test: a.limit,
        out: a.out,
        split: a.split,
        verify: a.verify,
        ..base_config(Action::Eval)
    }
}

fn analyze_spec(scheme: Option<&SchemeSettings>) -> pa_core::Result<SchemeSpec> {
    match scheme.map(|s| s.kind) {
        None | Some(SchemeKind::Full) => Ok(SchemeSpec::full()),
        Some(SchemeKind::Sign) => Ok(SchemeSpec::single_binary()),
        Some(SchemeKind::Pa) => {
            let s = scheme.expect("kind implies settings");
            SchemeSpec::pa(s.m, s.n)
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = lower_train(a);
            cfg.validate()?;
            run::cmd_train(&cfg)
        }
        Command::Quantize(a) => {
            let cfg = lower_quantize(a);
            cfg.validate()?;
            run::cmd_quantize(&cfg)
        }
        Command::Eval(a) => {
            let cfg = lower_eval(a);
            cfg.validate()?;
            run::cmd_eval(&cfg)
        }
        Command::Analyze(a) => {
            let scheme = a.scheme.settings(None);
            let cfg = RunConfig {
                arch: Some(a.arch.clone()),
                scheme,
                out: a.out.clone(),
                ..base_config(Action::Analyze)
            };
            cfg.validate()?;
            let req = analyze::AnalyzeRequest {
                arch: a.arch,
                spec: analyze_spec(scheme.as_ref())?,
                m: a.scheme.m,
                n: a.scheme.n,
                format: a.format.into(),
                out: a.out.as_deref(),
                compare: a.compare,
                latency: a.latency,
            };
            analyze::cmd_analyze(&req)?;
            Ok(())
        }
        Command::Bench(a) => {
            let cfg = base_config(Action::Bench);
            cfg.validate()?;
            if a.iters == 0 {
                return Err(CliError::Usage("--iters must be at least 1".into()));
            }
            bench::cmd_bench(a.iters, a.out.as_deref())?;
            Ok(())
        }
    }
}

fn configure_threads() {
    if let Ok(v) = std::env::var("PA_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(k) if k > 0 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(k)
                    .build_global();
            }
            _ => eprintln!("warning: ignoring unparseable PA_THREADS={v:?}"),
        }
    }
}

fn main() {
    configure_threads();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
