//! Command-line front end. Exit codes: 0 success, 2 usage or configuration
//! error, 1 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, load_csv, save_csv, Split, SplitDataset, SyntheticSpec};
use crate::error::Error;
use crate::evaluation::{confusion_csv, evaluate_ensemble};
use crate::experiments::{run_benchmark, run_tau_sweep, DEFAULT_TAUS};
use crate::gradcheck;
use crate::model::{BaselineKind, Checkpoint, ModelSpec};
use crate::trainer::{train_ensemble, RunOptions, TrainConfig, TrainedModel};

pub const OUT_ENV: &str = "HERITAGE_FUSION_OUT";

#[derive(Debug, Parser)]
#[command(name = "heritage-fusion", version, about = "Sensor/image fusion classifier: training, evaluation and experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a seed ensemble and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate saved checkpoints on a dataset.
    Eval(EvalArgs),
    /// Write a synthetic dataset CSV.
    Synth(SynthArgs),
    /// Train the fusion model and every baseline, then rank them.
    Benchmark(BenchmarkArgs),
    /// Train the fusion model for each target correlation.
    Sweep(SweepArgs),
    /// Compare backprop gradients with finite differences on toy models.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration JSON (`model`, `train`, `seeds`).
    #[arg(long, conflicts_with = "paper_defaults")]
    pub config: Option<PathBuf>,
    /// Use the published training configuration unchanged.
    #[arg(long)]
    pub paper_defaults: bool,
    /// Number of ensemble seeds (overrides the config).
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Worker threads for independent runs (default: one per core).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Override `train.max_epochs`.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Output directory (default: `$HERITAGE_FUSION_OUT/<command>` or `runs/<command>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory or directory of checkpoint JSON files.
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Split to evaluate: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Write the metrics JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// SyntheticSpec JSON; omitted fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset CSV. Without it a synthetic dataset is generated.
    #[arg(long, conflicts_with = "spec")]
    pub data: Option<PathBuf>,
    /// SyntheticSpec JSON used when `--data` is absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated baseline kinds (default: all five).
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<String>>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated target correlations.
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Everything that determines a run's numeric results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelSpec::default(), train: TrainConfig::default(), seeds: 10 }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub data: Option<String>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(Error::io(path, e)))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path) -> CliResult<SplitDataset> {
    if !path.exists() {
        return Err(usage(format!("data file not found: {}", path.display())));
    }
    load_csv(path).map_err(usage)
}

fn resolve_data(args: &DataArgs) -> CliResult<(SplitDataset, String)> {
    match (&args.data, &args.spec) {
        (Some(path), _) => Ok((load_data(path)?, path.display().to_string())),
        (None, spec) => {
            let spec: SyntheticSpec = match spec {
                Some(p) => read_json(p)?,
                None => SyntheticSpec::default(),
            };
            let data = generate_synthetic(&spec).map_err(usage)?;
            Ok((data, format!("synthetic:{}", serde_json::to_string(&spec).map_err(runtime)?)))
        }
    }
}

fn resolve_config(args: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seeds {
        cfg.seeds = s;
    }
    if let Some(e) = args.max_epochs {
        cfg.train.max_epochs = e;
    }
    if cfg.seeds == 0 {
        return Err(usage("seeds must be at least 1"));
    }
    if args.jobs == Some(0) {
        return Err(usage("--jobs must be at least 1"));
    }
    cfg.model.validate().map_err(usage)?;
    cfg.train.validate().map_err(usage)?;
    if let ModelSpec::Baseline(b) = &cfg.model {
        let ignored = b.ignored_fields();
        if !ignored.is_empty() {
            eprintln!("warning: {} ignores {}", b.kind, ignored.join(", "));
        }
    }
    Ok(cfg)
}

fn default_out(command: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(command)
}

/// Creates `dir`, refusing to reuse a nonempty one unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir).map_err(|e| usage(Error::io(dir, e)))?.next().is_some();
        if nonempty && !force {
            return Err(usage(format!("{} exists and is not empty; pass --force to replace it", dir.display())));
        }
        if nonempty {
            fs::remove_dir_all(dir).map_err(|e| runtime(Error::io(dir, e)))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| runtime(Error::io(dir, e)))
}

fn refuse_existing_file(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(usage(format!("{} exists; pass --force to replace it", path.display())));
    }
    Ok(())
}

/// Writes files under one output directory and remembers their names.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn write(&mut self, rel: &str, contents: &str) -> CliResult<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| runtime(Error::io(parent, e)))?;
        }
        fs::write(&path, contents).map_err(|e| runtime(Error::io(&path, e)))?;
        self.written.push(rel.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
        text.push('\n');
        self.write(rel, &text)
    }

    fn finish(mut self, command: &str, config: RunConfig, seeds: Vec<u64>, data: Option<String>, start: Instant) -> CliResult<()> {
        self.written.push("manifest.json".into());
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seeds,
            data,
            artifacts: self.written.clone(),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| runtime(Error::io(&path, e)))
    }
}

fn options(run: &RunArgs) -> RunOptions {
    RunOptions { jobs: run.jobs, progress: !run.quiet }
}

fn write_run_files(out: &mut Outputs, runs: &[TrainedModel]) -> CliResult<()> {
    for r in runs {
        let seed = r.seed();
        out.write_json(&format!("checkpoints/seed-{seed}.json"), &r.checkpoint())?;
        out.write_json(&format!("records/seed-{seed}.json"), &r.record)?;
        if !r.record.steps.is_empty() {
            let mut lines = String::new();
            for s in &r.record.steps {
                lines.push_str(&serde_json::to_string(s).map_err(runtime)?);
                lines.push('\n');
            }
            out.write(&format!("records/seed-{seed}.steps.jsonl"), &lines)?;
        }
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let start = Instant::now();
    let cfg = resolve_config(&args.run)?;
    let data = load_data(&args.data)?;
    if data.test.is_empty() {
        return Err(usage(format!("{} has no test rows", args.data.display())));
    }
    let dir = args.run.out.clone().unwrap_or_else(|| default_out("train"));
    prepare_dir(&dir, args.run.force)?;

    let runs = train_ensemble(&cfg.model, &cfg.train, &data, cfg.seeds, options(&args.run)).map_err(runtime)?;
    let evaluation = evaluate_ensemble(&runs, &data.test).map_err(runtime)?;

    let mut out = Outputs { dir, written: Vec::new() };
    out.write_json("config.json", &cfg)?;
    write_run_files(&mut out, &runs)?;
    out.write_json("metrics.json", &evaluation)?;
    out.write("confusion.csv", &confusion_csv(&evaluation.metrics))?;
    let m = &evaluation.metrics;
    println!(
        "{}: test accuracy {:.4}  f1 {:.4}  precision {:.4}  recall {:.4}  (seed mean {:.4} ± {:.4})",
        cfg.model,
        m.accuracy,
        m.weighted_f1,
        m.weighted_precision,
        m.weighted_recall,
        evaluation.seed_mean_accuracy,
        evaluation.seed_std_accuracy
    );
    let seeds = evaluation.seeds.clone();
    out.finish("train", cfg, seeds, Some(args.data.display().to_string()), start)
}

fn checkpoint_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let nested = dir.join("checkpoints");
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let entries = fs::read_dir(&dir).map_err(|e| usage(Error::io(&dir, e)))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| usage(Error::io(&dir, e)))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            files.push(path);
        }
    }
    if files.is_empty() {
        return Err(usage(format!("no checkpoint files in {}", dir.display())));
    }
    Ok(files)
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let split = Split::from_tag(&args.split).ok_or_else(|| usage(format!("unknown split `{}`", args.split)))?;
    if let Some(out) = &args.out {
        refuse_existing_file(out, args.force)?;
    }
    let mut models = Vec::new();
    for path in checkpoint_files(&args.checkpoints)? {
        let ck = Checkpoint::load(&path).map_err(usage)?;
        models.push(TrainedModel::from_checkpoint(&ck).map_err(|e| usage(format!("{}: {e}", path.display())))?);
    }
    models.sort_by_key(TrainedModel::seed);
    let data = load_data(&args.data)?;
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(usage(format!("{} has no {} rows", args.data.display(), split.tag())));
    }
    let evaluation = evaluate_ensemble(&models, samples).map_err(runtime)?;
    let mut text = serde_json::to_string_pretty(&evaluation).map_err(runtime)?;
    text.push('\n');
    match &args.out {
        Some(path) => fs::write(path, text).map_err(|e| runtime(Error::io(path, e))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let spec: SyntheticSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    let data = generate_synthetic(&spec).map_err(usage)?;
    refuse_existing_file(&args.out, args.force)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| runtime(Error::io(parent, e)))?;
    }
    save_csv(&data, &args.out).map_err(runtime)?;
    eprintln!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        data.len(),
        data.train.len(),
        data.val.len(),
        data.test.len(),
        args.out.display()
    );
    Ok(())
}

fn parse_kinds(kinds: &Option<Vec<String>>) -> CliResult<Vec<BaselineKind>> {
    match kinds {
        None => Ok(BaselineKind::ALL.to_vec()),
        Some(list) => list.iter().map(|k| k.trim().parse().map_err(usage)).collect(),
    }
}

fn cmd_benchmark(args: BenchmarkArgs) -> CliResult<()> {
    let start = Instant::now();
    let cfg = resolve_config(&args.run)?;
    let kinds = parse_kinds(&args.kinds)?;
    if !matches!(cfg.model, ModelSpec::Fusion(_)) {
        return Err(usage("benchmark config `model` must describe the fusion model"));
    }
    let (data, origin) = resolve_data(&args.data)?;
    let dir = args.run.out.clone().unwrap_or_else(|| default_out("benchmark"));
    prepare_dir(&dir, args.run.force)?;

    let report = run_benchmark(&data, &cfg.model, &kinds, &cfg.train, cfg.seeds, options(&args.run)).map_err(runtime)?;
    let mut out = Outputs { dir, written: Vec::new() };
    out.write_json("config.json", &cfg)?;
    out.write_json("benchmark.json", &report)?;
    out.write("benchmark.csv", &report.to_csv())?;
    println!("{:<4} {:<20} {:>8} {:>8} {:>9} {:>8} {:>10}", "rank", "model", "accuracy", "f1", "precision", "recall", "reference");
    for r in &report.rows {
        let reference = r.reference.map(|x| format!("{:.3}", x.accuracy)).unwrap_or_default();
        println!(
            "{:<4} {:<20} {:>8.4} {:>8.4} {:>9.4} {:>8.4} {:>10}",
            r.rank, r.model, r.accuracy, r.f1, r.precision, r.recall, reference
        );
    }
    let seeds = (0..cfg.seeds as u64).map(|k| cfg.train.seed.wrapping_add(k)).collect();
    out.finish("benchmark", cfg, seeds, Some(origin), start)
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let start = Instant::now();
    let cfg = resolve_config(&args.run)?;
    if !matches!(cfg.model, ModelSpec::Fusion(_)) {
        return Err(usage("sweep config `model` must describe the fusion model"));
    }
    let taus = args.taus.clone().unwrap_or_else(|| DEFAULT_TAUS.to_vec());
    if let Some(bad) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(usage(format!("tau {bad} outside [0, 1]")));
    }
    let (data, origin) = resolve_data(&args.data)?;
    let dir = args.run.out.clone().unwrap_or_else(|| default_out("sweep"));
    prepare_dir(&dir, args.run.force)?;

    let report = run_tau_sweep(&data, &cfg.model, &cfg.train, &taus, cfg.seeds, options(&args.run)).map_err(runtime)?;
    let mut out = Outputs { dir, written: Vec::new() };
    out.write_json("config.json", &cfg)?;
    out.write_json("sweep.json", &report)?;
    out.write("tau_curve.csv", &report.to_csv())?;
    for p in &report.points {
        let reference = p.reference_accuracy.map(|x| format!("  (reference {x:.3})")).unwrap_or_default();
        println!("tau {:.2}: accuracy {:.4}{reference}", p.tau, p.accuracy);
    }
    let seeds = (0..cfg.seeds as u64).map(|k| cfg.train.seed.wrapping_add(k)).collect();
    out.finish("sweep", cfg, seeds, Some(origin), start)
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult<()> {
    let reports = gradcheck::run_suite(args.seed).map_err(runtime)?;
    let mut worst: f64 = 0.0;
    for r in &reports {
        println!(
            "{:<20} {:>5} params  max rel err {:.3e}  ({})  {}",
            r.model,
            r.n_params,
            r.max_rel_error,
            r.worst_param,
            if r.passed() { "ok" } else { "FAIL" }
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e} (tolerance {:.0e})", gradcheck::TOLERANCE);
    if reports.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(runtime("gradient check failed"))
    }
}
