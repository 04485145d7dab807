//! Command implementations behind the `fair-exit` binary.
//!
//! Every command returns a [`CliError`] carrying the process exit status:
//! 2 for configuration problems, 3 for data problems, 4 for checkpoint
//! problems and 1 for anything else (I/O on outputs, diverged training).

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fair_exit::checkpoint::Checkpoint;
use fair_exit::config::{DataSource, RunConfig};
use fair_exit::data::{self, Dataset};
use fair_exit::fairness::{snnl, ProbeConfig};
use fair_exit::inference::{self, InferenceConfig};
use fair_exit::model::{self, MultiExitModel};
use fair_exit::{report, Error};

pub const THREADS_ENV: &str = "FAIR_EXIT_THREADS";
pub const DEFAULT_THETA_GRID: [f64; 4] = [0.5, 0.9, 0.99, 0.999];

pub const CHECKPOINT_FILE: &str = "model.ckpt.json";
pub const LOSS_HISTORY_FILE: &str = "loss_history.csv";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const SWEEP_FILE: &str = "sweep_theta.csv";
pub const PER_EXIT_FILE: &str = "per_exit.csv";
pub const SNNL_FILE: &str = "snnl_probe.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Failure = 1,
    Config = 2,
    Data = 3,
    Checkpoint = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub status: Status,
    pub message: String,
}

impl CliError {
    fn new(status: Status, message: impl fmt::Display) -> Self {
        Self {
            status,
            message: message.to_string(),
        }
    }

    pub fn code(&self) -> u8 {
        self.status as u8
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Status for an error raised while working with already-loaded inputs.
fn classify(e: &Error) -> Status {
    match e {
        Error::Config(_) => Status::Config,
        Error::Checkpoint(_) => Status::Checkpoint,
        Error::Data(_)
        | Error::Parse { .. }
        | Error::Schema { .. }
        | Error::Dimension(_)
        | Error::Degenerate(_)
        | Error::Undefined(_) => Status::Data,
        _ => Status::Failure,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::new(classify(&e), e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn with_status(status: Status) -> impl FnOnce(Error) -> CliError {
    move |e| CliError::new(status, e)
}

#[derive(Debug, Parser)]
#[command(name = "fair-exit", version, about = "Fairness-aware multi-exit networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run config; writes the checkpoint and loss history.
    Train(TrainArgs),
    /// Fairness report of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Early-exit accuracy and fairness over a grid of thresholds.
    SweepTheta(SweepArgs),
    /// Accuracy and fairness of each exit used on its own.
    PerExit(EvalArgs),
    /// Soft nearest neighbor loss of target and sensitive labels at each exit.
    SnnlProbe(SnnlArgs),
    /// Write the synthetic dataset described by a config to CSV.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `[output] dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Source {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV to evaluate on. Without it the checkpoint's own data source is
    /// regenerated and its test split used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (defaults to the checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: Source,
    /// Early-exit threshold (defaults to the checkpoint's).
    #[arg(long)]
    pub theta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: Source,
    /// Comma-separated ascending thresholds.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THETA_GRID)]
    pub theta: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct SnnlArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, short = 'T', default_value_t = 1.0)]
    pub temperature: f64,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Destination CSV file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Caps the global rayon pool from [`THREADS_ENV`] when it is set.
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::new(Status::Config, format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(args) => cmd_train(&args).map(|_| ()),
        Command::Eval(args) => cmd_eval(&args).map(|_| ()),
        Command::SweepTheta(args) => cmd_sweep(&args).map(|_| ()),
        Command::PerExit(args) => cmd_per_exit(&args).map(|_| ()),
        Command::SnnlProbe(args) => cmd_snnl_probe(&args).map(|_| ()),
        Command::GenData(args) => cmd_gen_data(&args),
    }
}

pub fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path).map_err(with_status(Status::Config))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(with_status(Status::Config))?;
    Ok(cfg)
}

/// The full dataset a config describes.
pub fn load_source(cfg: &RunConfig) -> CliResult<Dataset> {
    let data = match cfg.data.source {
        DataSource::Synthetic => data::generate_synthetic(&cfg.synth_spec()),
        DataSource::Csv => {
            let path = cfg.data.path.as_ref().expect("validated config has a csv path");
            data::load_csv(path)
        }
    };
    let data = data.map_err(with_status(Status::Data))?;
    warn_single_group(&data);
    Ok(data)
}

fn warn_single_group(data: &Dataset) {
    if let Some(g) = data.group_counts().iter().position(|&c| c == 0) {
        eprintln!("warning: no samples with sensitive = {g}; fairness gaps will be undefined");
    }
}

pub fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, MultiExitModel)> {
    let ckpt = Checkpoint::load(path).map_err(with_status(Status::Checkpoint))?;
    let model = ckpt.to_model().map_err(with_status(Status::Checkpoint))?;
    Ok((ckpt, model))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::new(Status::Failure, format!("{}: {e}", dir.display())))
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::new(Status::Failure, format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::new(Status::Failure, format!("{}: {e}", path.display())))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> CliResult<()> {
    w.flush()
        .map_err(|e| CliError::new(Status::Failure, format!("{}: {e}", path.display())))
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub loss_history: PathBuf,
    pub history: Vec<model::EpochRecord>,
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainOutput> {
    let cfg = load_config(&args.config, args.seed)?;
    let full = load_source(&cfg)?;
    let splits = data::split(&full, cfg.split.fractions(), cfg.seed, cfg.split.stratify).map_err(with_status(Status::Data))?;
    for (class, group) in &splits.small_cells {
        eprintln!("warning: cell (class {class}, group {group}) has fewer than 3 samples; kept in train");
    }
    if splits.train.is_empty() {
        return Err(CliError::new(Status::Data, "training split is empty"));
    }
    let mut model = MultiExitModel::new(cfg.model_config(full.dim(), full.num_classes())).map_err(with_status(Status::Config))?;
    let train_cfg = cfg.train_config();
    let history = model::train(&mut model, &splits.train, &train_cfg)?;
    let degenerate: usize = history.iter().map(|r| r.degenerate_batches).sum();
    if degenerate > 0 {
        eprintln!("warning: {degenerate} batches held a single sensitive group; their fairness loss was 0");
    }

    let out = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    create_dir(&out)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    Checkpoint::new(&model, &cfg, history.len())
        .save(&checkpoint)
        .map_err(with_status(Status::Failure))?;
    let loss_history = out.join(LOSS_HISTORY_FILE);
    let mut w = create_file(&loss_history)?;
    report::write_loss_history(&mut w, &history, model.num_exits()).map_err(with_status(Status::Failure))?;
    finish(w, &loss_history)?;
    if let Some(last) = history.last() {
        println!("trained {} epochs, final loss {:.6}", history.len(), last.loss.total);
    }
    println!("wrote {} and {}", checkpoint.display(), loss_history.display());
    Ok(TrainOutput {
        checkpoint,
        loss_history,
        history,
    })
}

/// The evaluation set for a command: `--data` if given, else the test split
/// of the checkpoint's own data source.
pub fn evaluation_data(ckpt: &Checkpoint, data: Option<&Path>) -> CliResult<Dataset> {
    let data = match data {
        Some(path) => {
            let data = data::load_csv(path).map_err(with_status(Status::Data))?;
            warn_single_group(&data);
            data
        }
        None => {
            let cfg = &ckpt.config;
            let full = load_source(cfg)?;
            data::split(&full, cfg.split.fractions(), cfg.seed, cfg.split.stratify)
                .map_err(with_status(Status::Data))?
                .test
        }
    };
    if data.is_empty() {
        return Err(CliError::new(Status::Data, "evaluation data is empty"));
    }
    if data.dim() != ckpt.model.input_dim {
        return Err(CliError::new(
            Status::Data,
            format!("data has {} features, model expects {}", data.dim(), ckpt.model.input_dim),
        ));
    }
    Ok(data)
}

fn output_dir(source: &Source) -> PathBuf {
    source.out.clone().unwrap_or_else(|| {
        source
            .checkpoint
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    })
}

fn open_source(source: &Source) -> CliResult<(Checkpoint, MultiExitModel, Dataset, PathBuf)> {
    let (ckpt, model) = load_checkpoint(&source.checkpoint)?;
    let data = evaluation_data(&ckpt, source.data.as_deref())?;
    let out = output_dir(source);
    create_dir(&out)?;
    Ok((ckpt, model, data, out))
}

#[derive(Debug)]
pub struct EvalOutput {
    pub report: fair_exit::FairnessReport,
    pub trace: fair_exit::InferenceTrace,
    pub text: PathBuf,
    pub json: PathBuf,
}

/// JSON form of an evaluation: the flat report keys, the exit histogram and
/// the inference settings used.
pub fn report_json(report: &fair_exit::FairnessReport, trace: &fair_exit::InferenceTrace, cfg: &InferenceConfig) -> serde_json::Value {
    let mut map = report.to_json();
    map.insert("exit_histogram".into(), serde_json::json!(trace.histogram));
    map.insert("theta".into(), serde_json::json!(cfg.theta));
    map.insert("mode".into(), serde_json::to_value(cfg.mode).expect("exit mode serializes"));
    map.insert("samples".into(), serde_json::json!(trace.entries.len()));
    serde_json::Value::Object(map)
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalOutput> {
    let (ckpt, model, data, out) = open_source(&args.source)?;
    let mut cfg = ckpt.config.inference_config();
    if let Some(theta) = args.theta {
        cfg.theta = theta;
    }
    cfg.validate().map_err(with_status(Status::Config))?;
    let aggregation = ckpt.config.inference.aggregation;
    let (report, trace) = inference::evaluate(&model, &data, &cfg, aggregation)?;

    let mut text = report.to_text();
    let hist: Vec<String> = trace.histogram.iter().map(usize::to_string).collect();
    text.push_str(&format!("exit_histogram = {}\n", hist.join(",")));
    let text_path = out.join(REPORT_TEXT_FILE);
    write_file(&text_path, &text)?;
    let json_path = out.join(REPORT_JSON_FILE);
    let json = serde_json::to_string_pretty(&report_json(&report, &trace, &cfg)).expect("report serializes");
    write_file(&json_path, &(json + "\n"))?;
    print!("{text}");
    Ok(EvalOutput {
        report,
        trace,
        text: text_path,
        json: json_path,
    })
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<PathBuf> {
    let (ckpt, model, data, out) = open_source(&args.source)?;
    let rows = inference::sweep_theta(&model, &data, &args.theta, ckpt.config.inference.aggregation)?;
    let path = out.join(SWEEP_FILE);
    let mut w = create_file(&path)?;
    inference::write_sweep_csv(&mut w, &rows).map_err(with_status(Status::Failure))?;
    finish(w, &path)?;
    println!("wrote {}", path.display());
    Ok(path)
}

pub fn cmd_per_exit(args: &EvalArgs) -> CliResult<PathBuf> {
    let (ckpt, model, data, out) = open_source(&args.source)?;
    let theta = args.theta.unwrap_or(ckpt.config.inference.theta);
    InferenceConfig::early_exit(theta)
        .validate()
        .map_err(with_status(Status::Config))?;
    let rows = inference::per_exit_eval(&model, &data, theta, ckpt.config.inference.aggregation)?;
    let path = out.join(PER_EXIT_FILE);
    let mut w = create_file(&path)?;
    inference::write_per_exit_csv(&mut w, &rows).map_err(with_status(Status::Failure))?;
    finish(w, &path)?;
    println!("wrote {}", path.display());
    Ok(path)
}

/// One row per exit position, shallow to deep.
#[derive(Debug, Clone, PartialEq)]
pub struct SnnlRow {
    pub position: String,
    pub target: f64,
    pub sensitive: f64,
}

pub fn snnl_rows(model: &MultiExitModel, data: &Dataset, temperature: f64) -> CliResult<Vec<SnnlRow>> {
    let cfg = ProbeConfig { temperature };
    let out = model.forward_all(data.features())?;
    let sensitive: Vec<usize> = data.sensitive().iter().map(|&a| a as usize).collect();
    let n = model.config().num_internal_exits();
    out.features
        .iter()
        .enumerate()
        .map(|(slot, f)| {
            let target = snnl(f, data.targets(), cfg).map_err(with_status(Status::Config))?;
            let sens = snnl(f, &sensitive, cfg).map_err(with_status(Status::Config))?;
            Ok(SnnlRow {
                position: fair_exit::Exit::from_slot(slot, n).to_string(),
                target: target.value,
                sensitive: sens.value,
            })
        })
        .collect()
}

pub fn cmd_snnl_probe(args: &SnnlArgs) -> CliResult<PathBuf> {
    let (_, model, data, out) = open_source(&args.source)?;
    if data.len() < 2 {
        return Err(CliError::new(Status::Data, "the SNNL probe needs at least 2 samples"));
    }
    let rows = snnl_rows(&model, &data, args.temperature)?;
    let path = out.join(SNNL_FILE);
    let mut w = create_file(&path)?;
    let io = |e: std::io::Error| CliError::new(Status::Failure, format!("{}: {e}", path.display()));
    writeln!(w, "position,snnl_target,snnl_sensitive").map_err(io)?;
    for r in &rows {
        writeln!(w, "{},{},{}", r.position, r.target, r.sensitive).map_err(io)?;
    }
    finish(w, &path)?;
    println!("wrote {}", path.display());
    Ok(path)
}

pub fn cmd_gen_data(args: &GenDataArgs) -> CliResult<()> {
    let cfg = load_config(&args.config, args.seed)?;
    if cfg.data.source != DataSource::Synthetic {
        return Err(CliError::new(Status::Config, "data.source: gen-data needs a synthetic source"));
    }
    let data = data::generate_synthetic(&cfg.synth_spec()).map_err(with_status(Status::Data))?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    data.save_csv(&args.out).map_err(with_status(Status::Failure))?;
    println!("wrote {} samples to {}", data.len(), args.out.display());
    Ok(())
}
