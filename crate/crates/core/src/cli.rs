//! Command-line surface: `synth`, `train`, `eval`, `probe`, `verify`.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 IO, 4 numeric
//! failure, 5 artifact mismatch; `verify` exits 1 when a suite fails.
//!
//! Configuration is a flat JSON object whose keys are the fields of
//! [`SynthConfig`] and [`TrainConfig`] (`seed` feeds both). Precedence is
//! named flags, then `--set key=value`, then the config file, then defaults.
//! Logs go to stderr as `key=value` records; verbosity comes from the
//! `COHORT_MIL_LOG` environment variable (`info` by default).

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde_json::{Map, Value};

use crate::dataset::{generate, read_dataset, write_dataset, Dataset, DatasetError, SynthConfig};
use crate::error::ModelError;
use crate::mil::AggregatorKind;
use crate::trainer::{
    aggregate, cohort_probe, load_fold_model, run_cv, EncoderMode, FoldModel, MetricsReport, TrainConfig, TrainError,
};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_MISMATCH: i32 = 5;

pub const LOG_ENV: &str = "COHORT_MIL_LOG";

#[derive(Debug, Parser)]
#[command(name = "cohort-mil", version, about = "Cohort-aware multiple-instance learning on synthetic slides")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (manifest + sidecar) and print its counts.
    Synth(SynthArgs),
    /// Cross-validated training; writes checkpoints and reports.
    Train(TrainArgs),
    /// Evaluate a trained fold (or every fold of a run) on a dataset.
    Eval(ModelArgs),
    /// Fit the cohort probe on a trained model's slide representations.
    Probe(ModelArgs),
    /// Run the built-in property suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest path; the sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one configuration key, e.g. `--set bias_strength=0.6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub aggregator: Option<AggregatorKind>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub encoder_mode: Option<EncoderMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// A fold directory (holding `model_0.ckpt`) or a run directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Use every slide instead of the fold's stored test split.
    #[arg(long)]
    pub all: bool,
    /// JSON output path; defaults to a file inside the model directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Run only suites whose name starts with one of these prefixes.
    #[arg(long)]
    pub only: Vec<String>,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

fn dataset_code(e: &DatasetError) -> i32 {
    match e {
        DatasetError::Io { .. } | DatasetError::Parse { .. } | DatasetError::Sidecar { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn train_code(e: &TrainError) -> i32 {
    match e {
        _ if e.is_numeric() => EXIT_NUMERIC,
        TrainError::Io { .. } => EXIT_IO,
        TrainError::Checkpoint(_) | TrainError::Mismatch(_) => EXIT_MISMATCH,
        TrainError::Dataset(d) => dataset_code(d),
        _ => EXIT_USAGE,
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        Self::new(dataset_code(&e), e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        Self::new(train_code(&e), e.to_string())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(EXIT_IO, format!("io error on {}: {e}", path.display()))
}

/// Field names of a config struct, from its default serialization.
fn field_names<T: serde::Serialize + Default>() -> BTreeSet<String> {
    match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

/// Flat configuration covering both the generator and the trainer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Builds from a flat JSON object; unknown keys are rejected.
    pub fn from_flat(map: &Map<String, Value>) -> Result<Self, CliError> {
        let synth_keys = field_names::<SynthConfig>();
        let train_keys = field_names::<TrainConfig>();
        let (mut s, mut t) = (Map::new(), Map::new());
        for (k, v) in map {
            let (in_s, in_t) = (synth_keys.contains(k), train_keys.contains(k));
            if !in_s && !in_t {
                return Err(CliError::new(EXIT_USAGE, format!("unknown configuration key `{k}`")));
            }
            if in_s {
                s.insert(k.clone(), v.clone());
            }
            if in_t {
                t.insert(k.clone(), v.clone());
            }
        }
        let bad = |e: serde_json::Error| CliError::new(EXIT_USAGE, format!("invalid configuration: {e}"));
        Ok(Self {
            synth: serde_json::from_value(Value::Object(s)).map_err(bad)?,
            train: serde_json::from_value(Value::Object(t)).map_err(bad)?,
        })
    }

    /// Flat JSON object of every resolved field.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        for v in [
            serde_json::to_value(&self.synth).expect("serializes"),
            serde_json::to_value(&self.train).expect("serializes"),
        ] {
            if let Value::Object(m) = v {
                out.extend(m);
            }
        }
        out
    }
}

/// Reads the config file (if any) and applies `--set` overrides on top.
pub fn load_flat_config(path: Option<&Path>, overrides: &[String]) -> Result<Map<String, Value>, CliError> {
    let mut map = match path {
        None => Map::new(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            match serde_json::from_str(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(CliError::new(EXIT_USAGE, format!("{}: expected a JSON object", p.display()))),
                Err(e) => return Err(CliError::new(EXIT_USAGE, format!("{}: {e}", p.display()))),
            }
        }
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::new(EXIT_USAGE, format!("override `{o}` is not KEY=VALUE")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        map.insert(k.trim().to_string(), value);
    }
    Ok(map)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let mut map = load_flat_config(args.config.as_deref(), &args.overrides)?;
    if let Some(seed) = args.seed {
        map.insert("seed".into(), seed.into());
    }
    let config = RunConfig::from_flat(&map)?;
    let data = generate(&config.synth)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    write_dataset(&data, &args.out)?;
    let resolved = args.out.with_extension("config.json");
    write_json(&resolved, &serde_json::to_value(&config.synth).expect("serializes"))?;
    info!(
        "event=synth_done manifest={} slides={} instances={}",
        args.out.display(),
        data.slides.len(),
        data.total_instances()
    );
    print!("{}", data.summary());
    Ok(())
}

fn resolve_train(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut map = load_flat_config(args.config.as_deref(), &args.overrides)?;
    let mut set = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            map.insert(k.into(), v);
        }
    };
    set("lambda", args.lambda.map(Value::from));
    set("tau", args.tau.map(Value::from));
    set("aggregator", args.aggregator.map(|a| serde_json::to_value(a).expect("serializes")));
    set("folds", args.folds.map(Value::from));
    set("encoder_mode", args.encoder_mode.map(|m| serde_json::to_value(m).expect("serializes")));
    set("seed", args.seed.map(Value::from));
    set("epochs", args.epochs.map(Value::from));
    let config = RunConfig::from_flat(&map)?;
    config.train.validate()?;
    Ok(config)
}

fn staging_dir(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_else(|| "run".into());
    name.push(".partial");
    out.with_file_name(name)
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let config = resolve_train(args)?;
    let data = read_dataset(&args.data)?;
    // outputs are assembled in a sibling directory and moved into place only
    // when every fold succeeded, so failures leave nothing partial behind
    let stage = staging_dir(&args.out_dir);
    if stage.exists() {
        fs::remove_dir_all(&stage).map_err(|e| io_error(&stage, e))?;
    }
    fs::create_dir_all(&stage).map_err(|e| io_error(&stage, e))?;
    let result = (|| -> Result<_, CliError> {
        write_json(&stage.join("resolved_config.json"), &config.train)?;
        Ok(run_cv(&data, &config.train, Some(&stage))?)
    })();
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            let _ = fs::remove_dir_all(&stage);
            return Err(e);
        }
    };
    if args.out_dir.exists() {
        fs::remove_dir_all(&args.out_dir).map_err(|e| io_error(&args.out_dir, e))?;
    }
    fs::rename(&stage, &args.out_dir).map_err(|e| io_error(&args.out_dir, e))?;
    print!("{}", outcome.aggregate.to_text());
    Ok(())
}

/// Fold directories under `model`: itself when it holds a checkpoint,
/// otherwise its `fold_{i}` children in order.
fn fold_dirs(model: &Path) -> Result<Vec<PathBuf>, CliError> {
    if model.join("model_0.ckpt").exists() {
        return Ok(vec![model.to_path_buf()]);
    }
    let dirs: Vec<PathBuf> = (0..)
        .map(|i| model.join(format!("fold_{i}")))
        .take_while(|d| d.is_dir())
        .collect();
    if dirs.is_empty() {
        return Err(CliError::new(
            EXIT_MISMATCH,
            format!("{} holds neither model_0.ckpt nor fold_0/", model.display()),
        ));
    }
    Ok(dirs)
}

/// The slides a fold is evaluated on: its stored test split unless `all`.
fn fold_data(dir: &Path, data: &Dataset, all: bool) -> Result<Dataset, CliError> {
    let split = dir.join("split.json");
    if all || !split.exists() {
        return Ok(data.clone());
    }
    let text = fs::read_to_string(&split).map_err(|e| io_error(&split, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::new(EXIT_MISMATCH, format!("{}: {e}", split.display())))?;
    let ids: Vec<&str> = v["test"]
        .as_array()
        .ok_or_else(|| CliError::new(EXIT_MISMATCH, format!("{}: no test list", split.display())))?
        .iter()
        .filter_map(Value::as_str)
        .collect();
    let idx = ids
        .iter()
        .map(|id| {
            data.slides
                .iter()
                .position(|s| s.slide_id == *id)
                .ok_or_else(|| CliError::new(EXIT_MISMATCH, format!("slide {id} of the stored split is not in the dataset")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(data.subset(&idx))
}

fn load_model(dir: &Path) -> Result<FoldModel, CliError> {
    load_fold_model(dir).map_err(|e| match e {
        TrainError::Io { .. } => CliError::from(e),
        other => CliError::new(EXIT_MISMATCH, other.to_string()),
    })
}

fn cmd_eval(args: &ModelArgs) -> Result<(), CliError> {
    let data = read_dataset(&args.data)?;
    let dirs = fold_dirs(&args.model)?;
    let mut reports: Vec<MetricsReport> = Vec::new();
    for dir in &dirs {
        let model = load_model(dir)?;
        let subset = fold_data(dir, &data, args.all)?;
        let report = model.evaluate(&subset, Some(&model.probe_config()))?;
        println!("# {}", dir.display());
        print!("{}", report.to_text());
        reports.push(report);
    }
    let out = args.out.clone().unwrap_or_else(|| args.model.join("eval.json"));
    if dirs.len() == 1 {
        write_json(&out, &reports[0])?;
    } else {
        let agg = aggregate(&reports);
        print!("{}", agg.to_text());
        write_json(&out, &serde_json::json!({ "folds": reports, "aggregate": agg }))?;
    }
    Ok(())
}

fn cmd_probe(args: &ModelArgs) -> Result<(), CliError> {
    let data = read_dataset(&args.data)?;
    let mut results = Vec::new();
    for dir in fold_dirs(&args.model)? {
        let model = load_model(&dir)?;
        let subset = fold_data(&dir, &data, args.all)?;
        let bags = model.bags(&subset)?;
        let z = bags
            .iter()
            .map(|b| model.ensemble.representation(&b.features))
            .collect::<Result<Vec<_>, ModelError>>()
            .map_err(TrainError::from)?;
        let cohorts: Vec<usize> = bags.iter().map(|b| b.cohort.0).collect();
        let auc = cohort_probe(&z, &cohorts, &model.probe_config())?;
        println!("fold_dir={} slides={} probe_auc={auc:.6}", dir.display(), bags.len());
        results.push(serde_json::json!({
            "model": dir.display().to_string(),
            "slides": bags.len(),
            "probe_auc": auc,
        }));
    }
    let out = args.out.clone().unwrap_or_else(|| args.model.join("probe.json"));
    write_json(&out, &results)
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let all = verify::suites();
    let chosen: Vec<_> = all
        .into_iter()
        .filter(|s| args.only.is_empty() || args.only.iter().any(|p| s.name.starts_with(p.as_str())))
        .collect();
    if chosen.is_empty() {
        return Err(CliError::new(EXIT_USAGE, "no suite matches --only"));
    }
    let results = verify::run_suites(&chosen);
    let mut stdout = std::io::stdout().lock();
    for r in &results {
        let _ = writeln!(
            stdout,
            "suite={} status={} seconds={:.3} detail=\"{}\"",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let _ = writeln!(stdout, "suites={} failed={failed}", results.len());
    if failed > 0 {
        return Err(CliError::new(EXIT_VERIFY_FAILED, format!("{failed} suite(s) failed")));
    }
    Ok(())
}

/// Installs the stderr logger once; later calls are no-ops.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env)
        .format(|buf, record| {
            writeln!(
                buf,
                "level={} target={} {}",
                record.level().as_str().to_lowercase(),
                record.target(),
                record.args()
            )
        })
        .try_init();
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            error!("event=failed exit_code={} message=\"{}\"", e.code, e.message);
            e.code
        }
    }
}
