//! Command-line front end for sparse GP classification: `train`,
//! `predict`, `evaluate` and `benchmark`.

pub mod bench;
pub mod error;
pub mod kernel_arg;
pub mod model;
pub mod pipeline;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sparsegpc::data::{load_csv_task, load_features_csv, Dataset, LabelColumn, Task};
use sparsegpc::meanfield::MfPredictMode;
use sparsegpc::optimize::{write_trace, Clock, OptimizerKind, TrainSchedule};
use sparsegpc::Error;

pub use error::{CliError, CliResult, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL};
pub use kernel_arg::KernelArg;
pub use model::{Method, ModelFile};

/// Time source for traces. `logical` counts objective evaluations so that
/// repeated runs write identical traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClockKind {
    Wall,
    Logical,
}

impl ClockKind {
    pub fn start(self) -> Clock {
        match self {
            ClockKind::Wall => Clock::wall(),
            ClockKind::Logical => Clock::logical(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sparsegpc", version, about = "Sparse variational Gaussian process classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write it as JSON.
    Train(TrainCmd),
    /// Write per-point predictions as CSV.
    Predict(PredictCmd),
    /// Holdout NLP and error of a model on labelled data, as JSON.
    Evaluate(EvaluateCmd),
    /// K-fold cross-validation over one or more methods.
    Benchmark(BenchmarkCmd),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV file with features and a label column.
    #[arg(long)]
    pub data: PathBuf,
    /// Label column: `last`, a zero-based index or a header name.
    #[arg(long, default_value = "last")]
    pub label_column: String,
    /// The first row is data, not a header.
    #[arg(long)]
    pub no_header: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_enum, default_value = "klsp")]
    pub method: Method,
    /// Kernel term `family[:variance[:lengthscale[,lengthscale..]]]`; repeat to sum terms.
    #[arg(long = "kernel")]
    pub kernels: Vec<KernelArg>,
    /// Number of inducing points.
    #[arg(long, conflicts_with = "inducing_percent")]
    pub num_inducing: Option<usize>,
    /// Inducing points as a percentage of the training set, rounded up.
    #[arg(long)]
    pub inducing_percent: Option<f64>,
    #[arg(long, value_enum, default_value = "lbfgs")]
    pub optimizer: Optimizer,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub step_rate: f64,
    /// Iterations with the kernel and noise held fixed.
    #[arg(long, default_value_t = 50)]
    pub phase1_iters: usize,
    #[arg(long, default_value_t = 200)]
    pub phase2_iters: usize,
    #[arg(long, default_value_t = 10)]
    pub trace_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standardize features with the training-set mean and deviation (default).
    #[arg(long, overrides_with = "no_standardize")]
    pub standardize: bool,
    #[arg(long)]
    pub no_standardize: bool,
    /// Starting noise variance for `--method gaussian`.
    #[arg(long, default_value_t = 1.0)]
    pub noise_variance: f64,
    #[arg(long, value_enum, default_value = "wall")]
    pub clock: ClockKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Optimizer {
    Lbfgs,
    Adadelta,
}

#[derive(Debug, Args)]
pub struct McArgs {
    /// Monte-Carlo samples for mean-field predictions; 0 uses the Gaussian approximation.
    #[arg(long, default_value_t = 0)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub mc_seed: u64,
}

impl McArgs {
    pub fn mode(&self) -> MfPredictMode {
        if self.mc_samples == 0 {
            MfPredictMode::GaussianApprox
        } else {
            MfPredictMode::MonteCarlo {
                samples: self.mc_samples,
                seed: self.mc_seed,
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long, default_value = "model.json")]
    pub model_out: PathBuf,
    /// JSON-lines optimization trace.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV of features. A label column, if present, is dropped.
    #[arg(long)]
    pub data: PathBuf,
    /// Column to drop; by default a single surplus last column is dropped.
    #[arg(long)]
    pub label_column: Option<String>,
    #[arg(long)]
    pub no_header: bool,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub mc: McArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub mc: McArgs,
}

#[derive(Debug, Args)]
pub struct BenchmarkCmd {
    #[command(flatten)]
    pub data: DataArgs,
    /// Methods to compare, overriding `--method`; takes several values.
    #[arg(long = "methods", value_enum, num_args = 1..)]
    pub methods: Vec<Method>,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    /// Name in the summary table; defaults to the file stem.
    #[arg(long)]
    pub dataset_name: Option<String>,
    #[arg(long, default_value = "benchmark")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub mc: McArgs,
}

impl FitArgs {
    pub fn config(&self) -> pipeline::TrainConfig {
        let inducing = match (self.num_inducing, self.inducing_percent) {
            (_, Some(p)) => pipeline::Inducing::Percent(p),
            (Some(m), None) => pipeline::Inducing::Count(m),
            (None, None) => pipeline::Inducing::Count(16),
        };
        pipeline::TrainConfig {
            method: self.method,
            kernel: self.kernels.clone(),
            inducing,
            schedule: TrainSchedule {
                phase1_iters: self.phase1_iters,
                phase2_iters: self.phase2_iters,
                optimizer: match self.optimizer {
                    Optimizer::Lbfgs => OptimizerKind::Lbfgs,
                    Optimizer::Adadelta => OptimizerKind::Adadelta,
                },
                step_rate: self.step_rate,
                batch_size: self.batch_size,
                seed: self.seed,
                trace_every: self.trace_every,
            },
            standardize: !self.no_standardize,
            noise_variance: self.noise_variance,
        }
    }
}

fn label_column(s: &str) -> LabelColumn {
    s.parse().expect("label column parsing is infallible")
}

fn load_labelled(args: &DataArgs, method: Method) -> CliResult<Dataset> {
    let task = if method.is_classifier() {
        Task::Classification
    } else {
        Task::Regression
    };
    Ok(load_csv_task(&args.data, &label_column(&args.label_column), !args.no_header, task)?)
}

fn open_out(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(cmd) => train(cmd),
        Command::Predict(cmd) => predict(cmd),
        Command::Evaluate(cmd) => evaluate(cmd),
        Command::Benchmark(cmd) => benchmark(cmd),
    }
}

fn train(cmd: TrainCmd) -> CliResult<()> {
    let cfg = cmd.fit.config();
    let data = load_labelled(&cmd.data, cfg.method)?;
    let mut clock = cmd.fit.clock.start();
    let fitted = pipeline::fit(&data, &cfg, &mut clock, None)?;
    if let Some(path) = &cmd.trace_out {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        write_trace(fitted.trace(), &mut f)?;
        f.flush()?;
    }
    fitted.model.save(&cmd.model_out)?;
    let meta = &fitted.model.metadata;
    eprintln!(
        "{} M={} bound {} -> {} after {} iterations ({:?})",
        cfg.method.name(),
        meta.num_inducing,
        meta.initial_bound,
        meta.final_bound,
        meta.iterations,
        meta.stop
    );
    Ok(())
}

fn load_prediction_inputs(cmd: &PredictCmd, dim: usize) -> CliResult<nalgebra::DMatrix<f64>> {
    let header = !cmd.no_header;
    if let Some(col) = &cmd.label_column {
        return Ok(load_features_csv(&cmd.data, header, Some(&label_column(col)), dim)?);
    }
    match load_features_csv(&cmd.data, header, None, dim) {
        Err(Error::DimensionMismatch(_)) => Ok(load_features_csv(&cmd.data, header, Some(&LabelColumn::Last), dim)
            .map_err(|_| CliError::Data(format!("{} does not have {dim} feature columns", cmd.data.display())))?),
        other => Ok(other?),
    }
}

fn predict(cmd: PredictCmd) -> CliResult<()> {
    let model = ModelFile::load(&cmd.model)?;
    let x = load_prediction_inputs(&cmd, model.input_dim())?;
    let p = model.predict(&x, cmd.mc.mode())?;
    let mut out = open_out(cmd.out.as_deref())?;
    model::write_predictions(&p, &mut out)?;
    out.flush()?;
    Ok(())
}

fn evaluate(cmd: EvaluateCmd) -> CliResult<()> {
    let model = ModelFile::load(&cmd.model)?;
    let data = load_labelled(&cmd.data, model.method)?;
    let metrics = pipeline::evaluate(&model, &data, cmd.mc.mode())?;
    let mut out = open_out(cmd.out.as_deref())?;
    writeln!(out, "{}", serde_json::to_string(&metrics).expect("metrics serialize"))?;
    out.flush()?;
    Ok(())
}

fn benchmark(cmd: BenchmarkCmd) -> CliResult<()> {
    let train = cmd.fit.config();
    let methods = if cmd.methods.is_empty() { vec![train.method] } else { cmd.methods.clone() };
    if methods.iter().any(|m| m.is_classifier() != methods[0].is_classifier()) {
        return Err(CliError::Config("cannot mix regression and classification methods".into()));
    }
    let data = load_labelled(&cmd.data, methods[0])?;
    let cfg = bench::BenchConfig {
        dataset_name: cmd.dataset_name.clone().unwrap_or_else(|| {
            cmd.data.data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        }),
        methods,
        folds: cmd.folds,
        seed: cmd.fit.seed,
        train,
        mf_mode: cmd.mc.mode(),
        clock: cmd.fit.clock,
    };
    let (_, report) = bench::run_benchmark(&data, &cfg, Some(&cmd.out_dir))?;
    let mut out = std::io::stdout().lock();
    bench::write_summary_csv(&report.summary, &mut out)?;
    Ok(())
}
