// SPDX-License-Identifier: Apache-2.0

//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical-check
//! failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aig::NODE_FEATURE_DIM;
use crate::checkpoint::{self, CheckpointError};
use crate::dataset::{
    self, Dataset, DatasetError, DatasetSource, GeneratorParams, LabelCaps, Sample, Span,
};
use crate::experiments::{self, ExperimentError};
use crate::gradcheck::{self, CheckResult, REL_TOL};
use crate::model::ModelConfig;
use crate::stats::default_seeds;
use crate::train::{
    constant_spp_mae, evaluate, evaluate_per_circuit, random_embedding_ttdp, split_dataset, train_with_callback,
    Split, Task, TrainConfig, TrainError,
};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.fgnn";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const EVAL_CIRCUITS_FILE: &str = "eval_circuits.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SWEEP_FILE: &str = "sweep_layers.csv";
pub const STABILITY_FILE: &str = "stability.csv";
pub const STABILITY_SUMMARY_FILE: &str = "stability_summary.csv";

/// Fixed seed of the random-embedding TTDP baseline.
const BASELINE_SEED: u64 = 7;

#[derive(Debug, Parser)]
#[command(name = "funcgnn", version, about = "Functional GNN for And-Inverter Graphs")]
pub struct Cli {
    /// Master seed; overrides `train.seed` from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with `[model]` and `[train]` tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for batched inference.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a labeled dataset from generated circuits or a directory of .aag files.
    Dataset(DatasetArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every primitive and the composed model.
    Gradcheck(GradcheckArgs),
    /// Train every ablation arm on one split.
    Ablate(AblateArgs),
    /// Grid over layer counts and split fractions.
    SweepLayers(SweepArgs),
    /// Repeat training over several seeds and summarize the spread.
    Stability(StabilityArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Read circuits from this directory instead of generating them.
    #[arg(long)]
    pub from_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    #[arg(long, default_value_t = 4)]
    pub min_inputs: usize,
    #[arg(long, default_value_t = 12)]
    pub max_inputs: usize,
    #[arg(long, default_value_t = 20)]
    pub min_ands: usize,
    #[arg(long, default_value_t = 300)]
    pub max_ands: usize,
    #[arg(long, default_value_t = 0.1)]
    pub invert_prob_min: f64,
    #[arg(long, default_value_t = 0.5)]
    pub invert_prob_max: f64,
    /// Label exactly up to this many inputs, sample above.
    #[arg(long, default_value_t = 16)]
    pub cap_exact_inputs: usize,
    #[arg(long, default_value_t = 64)]
    pub cap_inputs: usize,
    #[arg(long, default_value_t = 20000)]
    pub cap_nodes: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Overrides `train.task`.
    #[arg(long)]
    pub task: Option<Task>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "spp")]
    pub task: Task,
    /// `split.json` written by `train`; required unless the subset is `all`.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub subset: Subset,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Append a check against a deliberately wrong GELU derivative.
    #[arg(long, hide = true)]
    pub corrupt_gelu: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated arm names; all arms by default.
    #[arg(long, value_delimiter = ',')]
    pub arms: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "spp,ttdp")]
    pub tasks: Vec<Task>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9")]
    pub layers: Vec<usize>,
    /// Train and validation fraction each.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.02,0.05,0.1")]
    pub splits: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "spp,ttdp")]
    pub tasks: Vec<Task>,
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated seeds; 42, 84, ..., 420 by default.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "spp")]
    pub tasks: Vec<Task>,
}

/// Contents of `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

#[derive(Debug, Error)]
#[error("{msg}")]
pub struct CliError {
    pub kind: ExitKind,
    pub msg: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError {
            kind: ExitKind::Usage,
            msg: msg.into(),
        }
    }

    fn data(msg: impl Into<String>) -> Self {
        CliError {
            kind: ExitKind::Data,
            msg: msg.into(),
        }
    }

    fn numerical(msg: impl Into<String>) -> Self {
        CliError {
            kind: ExitKind::Numerical,
            msg: msg.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match e {
            TrainError::BadFractions(_) | TrainError::InvalidConfig(_) => ExitKind::Usage,
            TrainError::NonFinite(_) | TrainError::ZeroEmbedding { .. } => ExitKind::Numerical,
            _ => ExitKind::Data,
        };
        CliError {
            kind,
            msg: e.to_string(),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train(t) => t.into(),
            other => CliError::usage(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub results: serde_json::Value,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let entries = fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| io_error(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).unwrap_or(&path).to_path_buf());
        }
    }
    Ok(())
}

/// Content hash of a file or a directory tree: SHA-256 over the sorted
/// relative paths and blob hashes (`blob <len>\0<bytes>`) of every file.
pub fn content_hash(path: &Path) -> Result<String, CliError> {
    let blob = |p: &Path| -> Result<[u8; 32], CliError> {
        let bytes = fs::read(p).map_err(|e| io_error(p, e))?;
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", bytes.len()));
        h.update(&bytes);
        Ok(h.finalize().into())
    };
    if !path.is_dir() {
        return Ok(hex(&blob(path)?));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(blob(&path.join(&rel))?);
    }
    Ok(hex(&h.finalize()))
}

struct Ctx {
    out: PathBuf,
    seed: u64,
    config: RunConfig,
}

impl Ctx {
    fn ensure_out(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out).map_err(|e| io_error(&self.out, e))
    }

    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn write_csv<T: Serialize>(&self, file: &str, rows: &[T]) -> Result<(), CliError> {
        let path = self.path(file);
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_error(&path, e))?;
        for r in rows {
            w.serialize(r).map_err(|e| io_error(&path, e))?;
        }
        w.flush().map_err(|e| io_error(&path, e))
    }

    fn write_manifest(
        &self,
        command: &str,
        inputs: &[&Path],
        outputs: &[&str],
        results: serde_json::Value,
    ) -> Result<(), CliError> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputHash {
                    path: p.display().to_string(),
                    sha256: content_hash(p)?,
                })
            })
            .collect::<Result<_, CliError>>()?;
        let m = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: self.seed,
            config: self.config.clone(),
            inputs,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            results,
        };
        let path = self.path(RUN_MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))
    }

    fn split(&self, n: usize) -> Result<Split, CliError> {
        Ok(split_dataset(n, self.config.train.split, self.seed)?)
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn load_samples(dir: &Path) -> Result<Vec<Sample>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::data(format!("dataset directory {} not found", dir.display())));
    }
    let (ds, _) = dataset::load(dir)?;
    if ds.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    Ok(ds.samples)
}

fn validate(ctx: &Ctx) -> Result<(), CliError> {
    ctx.config
        .model
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    ctx.config.train.validate()?;
    Ok(())
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitKind::Usage as i32 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be positive"));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("thread pool already initialized; --threads ignored");
        }
    }
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    let ctx = Ctx {
        out: cli.out,
        seed: config.train.seed,
        config,
    };
    match cli.command {
        Command::Dataset(a) => cmd_dataset(&ctx, &a),
        Command::Train(a) => cmd_train(ctx, &a),
        Command::Eval(a) => cmd_eval(&ctx, &a),
        Command::Gradcheck(a) => cmd_gradcheck(&ctx, &a),
        Command::Ablate(a) => cmd_ablate(&ctx, &a),
        Command::SweepLayers(a) => cmd_sweep(&ctx, &a),
        Command::Stability(a) => cmd_stability(&ctx, &a),
    }
}

fn cmd_dataset(ctx: &Ctx, a: &DatasetArgs) -> Result<(), CliError> {
    let caps = LabelCaps {
        exact_inputs: a.cap_exact_inputs,
        max_inputs: a.cap_inputs,
        max_nodes: a.cap_nodes,
    };
    let (ds, source, inputs): (Dataset, _, Vec<&Path>) = match &a.from_dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(CliError::data(format!("input directory {} not found", dir.display())));
            }
            let (circuits, mut skipped) = dataset::read_aag_dir(dir)?;
            let mut ds = dataset::build(circuits, &caps, ctx.seed);
            skipped.append(&mut ds.skipped);
            ds.skipped = skipped;
            let src = DatasetSource::Directory {
                path: dir.display().to_string(),
            };
            (ds, src, vec![dir.as_path()])
        }
        None => {
            let params = GeneratorParams {
                count: a.count,
                inputs: Span {
                    min: a.min_inputs,
                    max: a.max_inputs,
                },
                ands: Span {
                    min: a.min_ands,
                    max: a.max_ands,
                },
                invert_prob: (a.invert_prob_min, a.invert_prob_max),
                seed: ctx.seed,
            };
            let ds = dataset::generate_dataset(&params, &caps).map_err(|e| match e {
                DatasetError::InvalidParams(m) => CliError::usage(m),
                other => other.into(),
            })?;
            (ds, DatasetSource::Generated(params), Vec::new())
        }
    };
    for s in &ds.skipped {
        log::warn!("skipped {}: {}", s.file, s.reason);
    }
    ctx.ensure_out()?;
    let manifest = dataset::save(&ds, &ctx.out, source, &caps, ctx.seed)?;
    eprintln!(
        "wrote {} samples ({} skipped) to {}",
        manifest.samples.len(),
        manifest.skipped,
        ctx.out.display()
    );
    let results = serde_json::json!({"samples": manifest.samples.len(), "skipped": manifest.skipped});
    ctx.write_manifest("dataset", &inputs, &[dataset::MANIFEST_FILE], results)
}

#[derive(Serialize)]
struct LogRow {
    epoch: usize,
    train_loss: f64,
    val_metric: f64,
    best_val: f64,
    seconds: f64,
}

fn cmd_train(mut ctx: Ctx, a: &TrainArgs) -> Result<(), CliError> {
    if let Some(t) = a.task {
        ctx.config.train.task = t;
    }
    validate(&ctx)?;
    let samples = load_samples(&a.data)?;
    let split = ctx.split(samples.len())?;
    let tc = &ctx.config.train;
    let mut best = f64::INFINITY;
    let mut log_rows = Vec::new();
    let out = train_with_callback(&samples, &split, &ctx.config.model, tc, |r| {
        best = best.min(r.val_metric);
        log::info!("epoch {} loss {:.6} val {:.6}", r.epoch, r.train_loss, r.val_metric);
        log_rows.push(LogRow {
            epoch: r.epoch,
            train_loss: r.train_loss,
            val_metric: r.val_metric,
            best_val: best,
            seconds: r.seconds,
        });
    })?;
    let test_metric = if split.test.is_empty() {
        None
    } else {
        Some(evaluate(&out.model, &samples, &split.test, tc.task, tc.batch_size)?)
    };
    ctx.ensure_out()?;
    checkpoint::save(&out.model, &ctx.path(CHECKPOINT_FILE))?;
    ctx.write_csv(TRAIN_LOG_FILE, &log_rows)?;
    let split_path = ctx.path(SPLIT_FILE);
    fs::write(&split_path, serde_json::to_string(&split).expect("split serializes") + "\n")
        .map_err(|e| io_error(&split_path, e))?;
    eprintln!(
        "{}: best epoch {} val {:.6} train {:.6}{}",
        tc.task,
        out.best_epoch,
        out.best_val,
        out.train_metric,
        test_metric.map(|t| format!(" test {t:.6}")).unwrap_or_default()
    );
    let results = serde_json::json!({
        "task": tc.task,
        "best_epoch": out.best_epoch,
        "epochs": out.records.len(),
        "best_val": out.best_val,
        "train_metric": out.train_metric,
        "test_metric": test_metric,
    });
    ctx.write_manifest(
        "train",
        &[a.data.as_path()],
        &[CHECKPOINT_FILE, TRAIN_LOG_FILE, SPLIT_FILE],
        results,
    )
}

#[derive(Serialize)]
struct EvalCircuitRow<'a> {
    circuit: &'a str,
    nodes: usize,
    pairs: usize,
    mae: f64,
}

#[derive(Serialize)]
struct EvalSummaryRow {
    task: Task,
    subset: &'static str,
    circuits: usize,
    nodes: usize,
    pairs: usize,
    mae: f64,
    baseline: &'static str,
    baseline_mae: f64,
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<(), CliError> {
    let model = checkpoint::load(&a.checkpoint)?;
    if model.config().d_in != NODE_FEATURE_DIM {
        return Err(CliError::data(format!(
            "config mismatch: checkpoint expects {} node features, dataset has {}",
            model.config().d_in,
            NODE_FEATURE_DIM
        )));
    }
    let samples = load_samples(&a.data)?;
    let (subset, idx): (&'static str, Vec<usize>) = match a.subset {
        Subset::All => ("all", (0..samples.len()).collect()),
        s => {
            let path = a
                .split_file
                .as_ref()
                .ok_or_else(|| CliError::usage("--split-file is required unless --subset all"))?;
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let split: Split = serde_json::from_str(&text).map_err(|e| io_error(path, e))?;
            let (name, idx) = match s {
                Subset::Train => ("train", split.train),
                Subset::Val => ("val", split.val),
                _ => ("test", split.test),
            };
            if let Some(&bad) = idx.iter().find(|&&i| i >= samples.len()) {
                return Err(CliError::data(format!(
                    "split index {bad} out of range for {} samples",
                    samples.len()
                )));
            }
            (name, idx)
        }
    };
    if idx.is_empty() {
        return Err(TrainError::EmptySplit("evaluated").into());
    }
    let bs = ctx.config.train.batch_size;
    let per = evaluate_per_circuit(&model, &samples, &idx, a.task, bs)?;
    let mae = evaluate(&model, &samples, &idx, a.task, bs)?;
    let (baseline, baseline_mae) = match a.task {
        Task::Spp => ("constant_0.5", constant_spp_mae(&samples, &idx, 0.5)?),
        Task::Ttdp => (
            "random_embedding",
            random_embedding_ttdp(&samples, &idx, model.config().hidden, BASELINE_SEED)?,
        ),
    };
    let rows: Vec<EvalCircuitRow> = idx
        .iter()
        .zip(&per)
        .map(|(&i, &m)| EvalCircuitRow {
            circuit: &samples[i].name,
            nodes: samples[i].num_nodes(),
            pairs: samples[i].pairs.len(),
            mae: m,
        })
        .collect();
    let summary = EvalSummaryRow {
        task: a.task,
        subset,
        circuits: idx.len(),
        nodes: rows.iter().map(|r| r.nodes).sum(),
        pairs: rows.iter().map(|r| r.pairs).sum(),
        mae,
        baseline,
        baseline_mae,
    };
    ctx.ensure_out()?;
    ctx.write_csv(EVAL_CIRCUITS_FILE, &rows)?;
    ctx.write_csv(EVAL_SUMMARY_FILE, &[&summary])?;
    println!("{} {subset}: mae {mae:.6} ({baseline} {baseline_mae:.6})", a.task);
    let mut inputs = vec![a.checkpoint.as_path(), a.data.as_path()];
    if let Some(p) = &a.split_file {
        inputs.push(p);
    }
    ctx.write_manifest(
        "eval",
        &inputs,
        &[EVAL_CIRCUITS_FILE, EVAL_SUMMARY_FILE],
        serde_json::json!({"mae": mae, "baseline_mae": baseline_mae}),
    )
}

#[derive(Serialize)]
struct GradRow<'a> {
    check: &'a str,
    max_rel_err: f64,
    entries: usize,
    passed: bool,
}

fn cmd_gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> Result<(), CliError> {
    let numerical = |e: crate::model::ModelError| CliError::numerical(e.to_string());
    let mut results: Vec<CheckResult> = gradcheck::run_suite(ctx.seed).map_err(numerical)?;
    if a.corrupt_gelu {
        results.push(gradcheck::corrupted_gelu_check(ctx.seed).map_err(numerical)?);
    }
    let rows: Vec<GradRow> = results
        .iter()
        .map(|r| GradRow {
            check: &r.name,
            max_rel_err: r.max_rel_err,
            entries: r.entries,
            passed: r.passed(),
        })
        .collect();
    for r in &rows {
        println!(
            "{:<28} {:>12.3e} {:>7} {}",
            r.check,
            r.max_rel_err,
            r.entries,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    ctx.ensure_out()?;
    ctx.write_csv(GRADCHECK_FILE, &rows)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.check).collect();
    ctx.write_manifest(
        "gradcheck",
        &[],
        &[GRADCHECK_FILE],
        serde_json::json!({"tolerance": REL_TOL, "failed": failed}),
    )?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::numerical(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn cmd_ablate(ctx: &Ctx, a: &AblateArgs) -> Result<(), CliError> {
    let arms = if a.arms.is_empty() {
        crate::model::Arm::ALL.to_vec()
    } else {
        experiments::parse_arms(&a.arms)?
    };
    validate(ctx)?;
    let samples = load_samples(&a.data)?;
    let split = ctx.split(samples.len())?;
    let rows = experiments::ablate(&samples, &split, &arms, &a.tasks, &ctx.config.model, &ctx.config.train)?;
    ctx.ensure_out()?;
    ctx.write_csv(ABLATION_FILE, &rows)?;
    ctx.write_manifest(
        "ablate",
        &[a.data.as_path()],
        &[ABLATION_FILE],
        serde_json::json!({"split_seed": ctx.seed, "arms": arms.iter().map(|a| a.name()).collect::<Vec<_>>()}),
    )
}

fn cmd_sweep(ctx: &Ctx, a: &SweepArgs) -> Result<(), CliError> {
    if a.layers.contains(&0) {
        return Err(CliError::usage("layer counts must be positive"));
    }
    validate(ctx)?;
    let samples = load_samples(&a.data)?;
    let rows = experiments::sweep_layers(
        &samples,
        &a.layers,
        &a.splits,
        &a.tasks,
        &ctx.config.model,
        &ctx.config.train,
        ctx.seed,
    )?;
    ctx.ensure_out()?;
    ctx.write_csv(SWEEP_FILE, &rows)?;
    ctx.write_manifest(
        "sweep-layers",
        &[a.data.as_path()],
        &[SWEEP_FILE],
        serde_json::json!({"split_seed": ctx.seed, "runs": rows.len()}),
    )
}

fn cmd_stability(ctx: &Ctx, a: &StabilityArgs) -> Result<(), CliError> {
    let seeds = if a.seeds.is_empty() {
        default_seeds(10)
    } else {
        a.seeds.clone()
    };
    if seeds.len() < 2 {
        return Err(ExperimentError::TooFewSeeds(seeds.len()).into());
    }
    validate(ctx)?;
    let samples = load_samples(&a.data)?;
    let split = ctx.split(samples.len())?;
    let (rows, summary) =
        experiments::stability(&samples, &split, &seeds, &a.tasks, &ctx.config.model, &ctx.config.train)?;
    ctx.ensure_out()?;
    ctx.write_csv(STABILITY_FILE, &rows)?;
    ctx.write_csv(STABILITY_SUMMARY_FILE, &summary)?;
    ctx.write_manifest(
        "stability",
        &[a.data.as_path()],
        &[STABILITY_FILE, STABILITY_SUMMARY_FILE],
        serde_json::json!({"split_seed": ctx.seed, "seeds": seeds}),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_fields() {
        let c: RunConfig = toml::from_str("[model]\nL = 2\nhidden = 8\n[train]\nlr = 0.01\ntask = \"ttdp\"\n").unwrap();
        assert_eq!(c.model.layers, 2);
        assert_eq!(c.model.hidden, 8);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.task, Task::Ttdp);
        assert!(toml::from_str::<RunConfig>("[model]\nlayers = 2\n").is_err());
        assert!(toml::from_str::<RunConfig>("[optim]\nlr = 1\n").is_err());
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["funcgnn", "frobnicate"]), 1);
        assert_eq!(run(["funcgnn", "train"]), 1);
        assert_eq!(run(["funcgnn", "--help"]), 0);
    }

    #[test]
    fn hash_is_content_addressed() {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join("a"), b"x").unwrap();
        fs::create_dir(d.path().join("s")).unwrap();
        fs::write(d.path().join("s/b"), b"y").unwrap();
        let h1 = content_hash(d.path()).unwrap();
        assert_eq!(h1.len(), 64);
        fs::write(d.path().join("s/b"), b"z").unwrap();
        assert_ne!(content_hash(d.path()).unwrap(), h1);
        fs::write(d.path().join("s/b"), b"y").unwrap();
        assert_eq!(content_hash(d.path()).unwrap(), h1);
    }

    #[test]
    fn train_error_exit_kinds() {
        assert_eq!(CliError::from(TrainError::NonFinite(3)).kind, ExitKind::Numerical);
        assert_eq!(CliError::from(TrainError::EmptySplit("test")).kind, ExitKind::Data);
        assert_eq!(CliError::from(TrainError::InvalidConfig("x".into())).kind, ExitKind::Usage);
        assert_eq!(
            CliError::from(ExperimentError::UnknownArm("x".into())).kind,
            ExitKind::Usage
        );
    }
}
