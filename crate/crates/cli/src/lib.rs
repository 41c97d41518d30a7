//! Command-line front end: data generation, training runs, evaluation,
//! property verification and Cayley table printing.

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cgenn::algebra::{build_cayley_table, Blade, DiagonalMetric};
use cgenn::model::{
    evaluate, Checkpoint, Dataset, EvalMetrics, Model, ModelConfig, OptimizerKind, StepRecord, TrainConfig,
    TrainState, TrainSummary, LOG_INTERVAL,
};
use cgenn::properties::{self, Mutation, PropertyReport, Suite, SuiteOptions};
use cgenn::tasks::{self, Samples, Task, TaskError, DEFAULT_DT, DEFAULT_SIM_STEPS};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ABORTED_MARKER: &str = ".aborted";

#[derive(Debug, Parser)]
#[command(name = "cgenn", version, about = "Clifford group equivariant networks with a learnable metric")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as JSON Lines.
    GenData(GenDataArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the property suites.
    Verify(VerifyArgs),
    /// Print the blade multiplication table.
    Cayley(CayleyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub task: Task,
    /// Number of samples.
    #[arg(long = "n")]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Integrator step (n-body only).
    #[arg(long, default_value_t = DEFAULT_DT)]
    pub dt: f64,
    /// Integrator steps per sample (n-body only).
    #[arg(long, default_value_t = DEFAULT_SIM_STEPS)]
    pub sim_steps: usize,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds both parameter initialization and batch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    /// Fraction of training after which the metric starts learning.
    #[arg(long)]
    pub metric_activation: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the task whose layout matches the checkpoint.
    #[arg(long)]
    pub task: Option<Task>,
    /// Also write the metrics here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all")]
    pub suite: Suite,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    /// Write the full report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_mutation: Option<Mutation>,
}

#[derive(Debug, Args)]
pub struct CayleyArgs {
    #[arg(long)]
    pub dim: usize,
    /// Comma-separated diagonal entries; all ones by default.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub signature: Option<Vec<f64>>,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        other => Err(format!("unknown optimizer `{other}` (expected adam or sgd)")),
    }
}

/// Errors the user can fix by changing flags or the config file.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

/// The property suites reported failures.
#[derive(Debug)]
pub struct VerificationFailed(pub usize);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} property failures", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        EXIT_USAGE
    } else if err.downcast_ref::<VerificationFailed>().is_some() {
        EXIT_VERIFY
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a).map(|_| ()),
        Command::Eval(a) => eval(&a).map(|_| ()),
        Command::Verify(a) => verify(&a),
        Command::Cayley(a) => cayley(&a),
    }
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    if args.count == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let samples = match args.task {
        Task::Nbody => Samples::Nbody(
            tasks::gen_nbody(args.count, args.seed, args.dt, args.sim_steps).map_err(|e| match e {
                TaskError::Settings(m) => usage(m),
                other => other.into(),
            })?,
        ),
        Task::SignedVolume => Samples::generate(args.task, args.count, args.seed)?,
    };
    create_parent(&args.out)?;
    let mut out = BufWriter::new(File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?);
    samples.write_jsonl(&mut out)?;
    out.flush()?;
    println!("wrote {} {} samples to {}", samples.len(), args.task, args.out.display());
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

/// A fully resolved training run, echoed into the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_data: PathBuf,
    pub eval_data: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// A config file; anything missing comes from the task defaults or flags.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    task: Option<Task>,
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    train_data: Option<PathBuf>,
    eval_data: Option<PathBuf>,
    out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(args: &TrainArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
                serde_json::from_str::<ConfigFile>(&text)
                    .map_err(|e| usage(format!("parsing {}: {e}", path.display())))?
            }
            None => ConfigFile::default(),
        };
        let task = args
            .task
            .or(file.task)
            .ok_or_else(|| usage("no task given (use --task or set `task` in the config)"))?;
        let mut model = file.model.unwrap_or_else(|| task.model_config(0));
        let mut train = file
            .train
            .unwrap_or_else(|| TrainConfig { steps: task.default_steps(), ..TrainConfig::default() });
        if let Some(seed) = args.seed {
            model.seed = seed;
            train.seed = seed;
        }
        if let Some(v) = args.steps {
            train.steps = v;
        }
        if let Some(v) = args.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = args.learning_rate {
            train.learning_rate = v;
        }
        if let Some(v) = args.metric_activation {
            train.metric_activation_fraction = v;
        }
        if let Some(v) = args.optimizer {
            train.optimizer = v;
        }
        if let Some(v) = args.epsilon {
            model.epsilon = v;
        }
        let config = RunConfig {
            task,
            model,
            train,
            train_data: args
                .train_data
                .clone()
                .or(file.train_data)
                .ok_or_else(|| usage("no training data given (use --train-data or set `train_data`)"))?,
            eval_data: args.eval_data.clone().or(file.eval_data),
            out_dir: args
                .out
                .clone()
                .or(file.out_dir)
                .ok_or_else(|| usage("no run directory given (use --out or set `out_dir`)"))?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        let expected = self.task.model_config(self.model.seed);
        if self.model.inputs != expected.inputs
            || self.model.output_kind != expected.output_kind
            || self.model.target_width() != expected.target_width()
        {
            return Err(usage(format!("the model layout does not fit the {} task", self.task)));
        }
        for path in std::iter::once(&self.train_data).chain(&self.eval_data) {
            if !path.is_file() {
                return Err(usage(format!("data file {} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

fn load_dataset(task: Task, path: &Path) -> Result<Dataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let samples = Samples::read_jsonl(task, BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    Ok(samples.dataset()?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// What `summary.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: Task,
    #[serde(flatten)]
    pub train: TrainSummary,
    pub metric_activated: bool,
    pub metric_offdiag_norm: f64,
}

#[derive(Debug, Serialize)]
struct CsvRow {
    step: usize,
    train_loss: f64,
    eval_loss: Option<f64>,
    metric_activated: bool,
    metric_offdiag_norm: f64,
}

impl From<&StepRecord> for CsvRow {
    fn from(r: &StepRecord) -> Self {
        Self {
            step: r.step,
            train_loss: r.train_loss,
            eval_loss: r.eval_loss,
            metric_activated: r.metric_activated,
            metric_offdiag_norm: r.metric_offdiag_norm,
        }
    }
}

pub fn train(args: &TrainArgs) -> Result<RunSummary> {
    let config = RunConfig::resolve(args)?;
    train_with(&config)
}

/// Runs `config`, writing the config echo, metrics, checkpoint and summary
/// into its run directory.
pub fn train_with(config: &RunConfig) -> Result<RunSummary> {
    train_observed(config, |_, _| {})
}

/// [`train_with`], also handing every logged step to `observer`.
pub fn train_observed(config: &RunConfig, mut observer: impl FnMut(&StepRecord, &TrainState)) -> Result<RunSummary> {
    let train_data = load_dataset(config.task, &config.train_data)?;
    let eval_data = config.eval_data.as_deref().map(|p| load_dataset(config.task, p)).transpose()?;
    let dir = &config.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let marker = dir.join(ABORTED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    write_json(&dir.join(CONFIG_FILE), config)?;

    let mut state = TrainState::new(config.model.clone(), config.train.clone()).map_err(|e| usage(e.to_string()))?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut csv = csv::Writer::from_writer(BufWriter::new(
        File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?,
    ));
    let mut io_error: Option<anyhow::Error> = None;
    let outcome = state.run(&train_data, eval_data.as_ref(), |record, st| {
        observer(record, st);
        if io_error.is_some() {
            return;
        }
        let written = csv.serialize(CsvRow::from(record)).map_err(anyhow::Error::from).and_then(|()| {
            if record.step % LOG_INTERVAL == 0 {
                csv.flush()?;
            }
            Ok(())
        });
        if let Err(e) = written {
            io_error = Some(e);
        }
    });
    csv.flush()?;
    if let Some(e) = io_error {
        return Err(e.context(format!("writing {}", metrics_path.display())));
    }
    write_json(&dir.join(CHECKPOINT_FILE), &state.checkpoint())?;
    let summary = match outcome {
        Ok(s) => s,
        Err(e) => {
            fs::write(&marker, format!("{e}\n"))?;
            return Err(anyhow::Error::from(e).context(format!("training aborted; partial run kept in {}", dir.display())));
        }
    };
    let metric = state.model().metric()?;
    let summary = RunSummary {
        task: config.task,
        train: summary,
        metric_activated: state.model().is_activated(),
        metric_offdiag_norm: metric.off_diagonal_norm(),
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    println!(
        "trained {} for {} steps: train loss {:e} -> {:e}{}; activation step {}",
        config.task,
        summary.train.steps,
        summary.train.initial_train_loss,
        summary.train.final_train_loss,
        summary.train.final_eval_loss.map(|l| format!(", eval loss {l:e}")).unwrap_or_default(),
        summary.train.activation_step.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
    );
    Ok(summary)
}

/// The task whose default layout matches `config`.
pub fn infer_task(config: &ModelConfig) -> Option<Task> {
    [Task::SignedVolume, Task::Nbody].into_iter().find(|t| {
        let d = t.model_config(0);
        d.inputs == config.inputs && d.output_kind == config.output_kind && d.target_width() == config.target_width()
    })
}

pub fn eval(args: &EvalArgs) -> Result<EvalMetrics> {
    let path = if args.checkpoint.is_dir() { args.checkpoint.join(CHECKPOINT_FILE) } else { args.checkpoint.clone() };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let checkpoint: Checkpoint =
        serde_json::from_str(&text).with_context(|| format!("parsing checkpoint {}", path.display()))?;
    let model = Model::from_checkpoint(&checkpoint)?;
    let task = match args.task.or_else(|| infer_task(model.config())) {
        Some(t) => t,
        None => bail!("cannot tell which task the checkpoint was trained on; pass --task"),
    };
    let data = load_dataset(task, &args.data)?;
    let metrics = evaluate(&model, &data)?;
    let text = serde_json::to_string_pretty(&metrics)?;
    println!("{text}");
    if let Some(out) = &args.json {
        create_parent(out)?;
        fs::write(out, format!("{text}\n")).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(metrics)
}

pub fn verify(args: &VerifyArgs) -> Result<()> {
    if args.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let options = SuiteOptions { seed: args.seed, trials: args.trials, mutation: args.inject_mutation };
    let report = properties::run_suite_with(args.suite, options);
    print_report(&report);
    if let Some(out) = &args.json {
        create_parent(out)?;
        write_json(out, &report)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(VerificationFailed(report.failures.len()).into())
    }
}

fn print_report(report: &PropertyReport) {
    for p in &report.properties {
        let failures = report.failures.iter().filter(|f| f.property == p.name).count();
        let status = match (p.tolerance, failures) {
            (None, _) => "MEASURE",
            (Some(_), 0) => "PASS",
            _ => "FAIL",
        };
        let tol = p.tolerance.map(|t| format!("{t:e}")).unwrap_or_else(|| "-".into());
        println!("{status:<7} {:<40} cases={:<5} max_error={:.3e} tol={tol}", p.name, p.cases, p.max_error);
    }
    for f in report.failures.iter().take(20) {
        let observed = f.observed.map(|o| format!("{o:e}")).unwrap_or_else(|| "-".into());
        println!(
            "  failure {} case {}: observed {observed}, tolerance {:e}{} [{}]",
            f.property,
            f.case,
            f.tolerance,
            f.message.as_deref().map(|m| format!(", {m}")).unwrap_or_default(),
            f.inputs
        );
    }
    if report.failures.len() > 20 {
        println!("  ... {} more failures", report.failures.len() - 20);
    }
    println!(
        "{} suite, seed {}, {} trials: {} cases, {} failures",
        report.suite,
        report.seed,
        report.trials,
        report.cases,
        report.failures.len()
    );
}

/// Rows `a b -> scale c` for every blade pair.
pub fn cayley_rows(dim: usize, signature: &[f64]) -> Result<Vec<String>> {
    if signature.len() != dim {
        return Err(usage(format!("--signature has {} entries for --dim {dim}", signature.len())));
    }
    let metric = DiagonalMetric::new(signature.to_vec()).map_err(|e| usage(e.to_string()))?;
    let table = build_cayley_table(&metric).map_err(|e| usage(e.to_string()))?;
    let size = table.size() as u32;
    let mut rows = Vec::with_capacity((size * size) as usize);
    for a in 0..size {
        for b in 0..size {
            let (a, b) = (Blade::from_mask(a), Blade::from_mask(b));
            let entry = table.entry(a, b);
            rows.push(format!("{a} {b} -> {} {}", entry.scale, entry.blade));
        }
    }
    Ok(rows)
}

pub fn cayley(args: &CayleyArgs) -> Result<()> {
    let signature = args.signature.clone().unwrap_or_else(|| vec![1.0; args.dim]);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for row in cayley_rows(args.dim, &signature)? {
        writeln!(out, "{row}")?;
    }
    Ok(())
}
