//! Command-line interface: argument definitions, one runner per command,
//! run directories with manifests, and error categories that map to
//! distinct exit codes.
//!
//! | exit | category       | meaning                                   |
//! |------|----------------|-------------------------------------------|
//! | 0    | —              | success                                   |
//! | 2    | `usage`        | unknown flag or malformed argument        |
//! | 3    | `config`       | config/grid schema or value violation     |
//! | 4    | `io`           | missing or unreadable/unwritable file     |
//! | 5    | `data`         | malformed dataset records                 |
//! | 6    | `training`     | divergence or model/data incompatibility  |
//! | 7    | `corrupt`      | checkpoint or cache fails to decode       |
//! | 8    | `verification` | replay or digest check failed             |

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use posttrain_core::dpo::{pair_stats, train_dpo};
use posttrain_core::model::{ModelCheckpoint, ModelConfig, ModelError};
use posttrain_core::rm::{rm_accuracy, train_rm, RmReport};
use posttrain_core::sft::train_sft;
use posttrain_core::tasks::{evaluate, gen_task, task_preference_pairs, TaskData, TaskError, TaskKind, TaskSpec};
use posttrain_core::train::{StepRecord, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::lang::{language_distribution, HeuristicDetector};
use crate::audit::{audit_report, load_corpus, AuditError, FieldMap, IndexMode, DEFAULT_N};
use crate::config::{ConfigError, Overrides, RunConfig};
use crate::io::{
    file_sha256, load_checkpoint, load_reward_model, read_text, save_checkpoint, save_ref_cache, save_reward_model,
    write_atomic, IoError,
};
use crate::loaders::{load_pairs, load_sft, raw_pair_line, raw_sft_line, Diagnostic, LoadError, PairRecord};
use crate::manifest::{artifact_mismatches, changed_inputs, code_version, unix_now, Artifact, FileDigest, RunManifest, MANIFEST_FILE};
use crate::sweep::{contour_csv, ratio_analysis, run_sweep, Stage, SweepError, SweepGrid};
use crate::trainlog::TrainLog;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "POSTTRAIN_OUT_ROOT";
const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Config,
    Io,
    Data,
    Training,
    Corrupt,
    Verification,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::Config => 3,
            Category::Io => 4,
            Category::Data => 5,
            Category::Training => 6,
            Category::Corrupt => 7,
            Category::Verification => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Io => "io",
            Category::Data => "data",
            Category::Training => "training",
            Category::Corrupt => "corrupt",
            Category::Verification => "verification",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
#[error("error[{category}]: {message}")]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    /// The single stderr line: `error[<category>]: <message>`.
    pub fn line(&self) -> String {
        format!("error[{}]: {}", self.category, self.message.replace('\n', " "))
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        let cat = match e {
            IoError::Fs { .. } => Category::Io,
            IoError::Model { .. } | IoError::Container { .. } => Category::Corrupt,
        };
        CliError::new(cat, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let cat = match e {
            ModelError::Config(_) => Category::Config,
            ModelError::Container(_) | ModelError::Layout(_) => Category::Corrupt,
            _ => Category::Training,
        };
        CliError::new(cat, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let cat = match e {
            TrainError::Config(_) => Category::Config,
            TrainError::EmptyDataset | TrainError::Data(_) => Category::Data,
            TrainError::Model(m) => return m.into(),
            _ => Category::Training,
        };
        CliError::new(cat, e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(io) => io.into(),
            other => CliError::new(Category::Config, other.to_string()),
        }
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Io(io) => io.into(),
            other => CliError::new(Category::Data, other.to_string()),
        }
    }
}

impl From<AuditError> for CliError {
    fn from(e: AuditError) -> Self {
        match e {
            AuditError::Io(io) => io.into(),
            AuditError::ZeroN => CliError::new(Category::Config, e.to_string()),
            other => CliError::new(Category::Data, other.to_string()),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Io(io) => io.into(),
            SweepError::Grid(_) => CliError::new(Category::Config, e.to_string()),
            other => CliError::new(Category::Data, other.to_string()),
        }
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        CliError::new(Category::Config, e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "posttrain", version, about = "Desk-scale post-training lab: SFT, DPO, reward models, sweeps and dataset audits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Hyperparameter flags shared by the training commands; each overrides
/// the value from `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Run configuration file (TOML with [model] and [train] tables)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Peak learning rate [per optimizer step]
    #[arg(long, value_name = "LR")]
    pub lr: Option<f64>,
    /// Batch size [examples per optimizer step]
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    /// Warmup length [fraction of total steps, 0..1]
    #[arg(long, value_name = "FRAC")]
    pub warmup_ratio: Option<f64>,
    /// Training length [epochs]
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// DPO KL coefficient β [dimensionless; DPO only]
    #[arg(long, value_name = "BETA")]
    pub beta: Option<f64>,
    /// Sequence length cap [tokens]
    #[arg(long, value_name = "TOKENS")]
    pub max_seq_len: Option<usize>,
    /// Seed for model initialization and data order [integer]
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
    /// Run directory [path; default: $POSTTRAIN_OUT_ROOT/<command>, else runs/<command>]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl TrainFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            peak_lr: self.lr,
            batch_size: self.batch_size,
            warmup_ratio: self.warmup_ratio,
            epochs: self.epochs,
            beta: self.beta,
            max_seq_len: self.max_seq_len,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Supervised finetuning on a JSON-lines conversation file
    Sft {
        /// Training data [JSON lines: chat or raw prompt/completion records]
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Starting checkpoint [path; default: random init from the config's [model]]
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Direct preference optimization from an SFT checkpoint (reference log-probs are cached first)
    Dpo {
        /// Preference pairs [JSON lines]
        #[arg(long, value_name = "FILE")]
        pairs: PathBuf,
        /// SFT checkpoint; serves as both the starting policy and the frozen reference [path]
        #[arg(long, value_name = "CKPT")]
        init: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Reward-model training on preference pairs
    Rm {
        /// Preference pairs [JSON lines]
        #[arg(long, value_name = "FILE")]
        pairs: PathBuf,
        /// Backbone checkpoint, normally the SFT model [path; default: random init]
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Pairwise accuracy of a reward model, overall and per category
    RmEval {
        /// Reward-model checkpoint [path]
        #[arg(long, value_name = "CKPT")]
        rm: PathBuf,
        /// Preference pairs [JSON lines]
        #[arg(long, value_name = "FILE")]
        pairs: PathBuf,
        /// Sequence length cap; longer prompts are left-truncated [tokens]
        #[arg(long, value_name = "TOKENS", default_value_t = 256)]
        max_seq_len: usize,
        /// Also write rm_eval.json and a manifest here [path]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Learning-rate × batch-size grid sweep with contour CSV output
    Sweep {
        /// Stage trained in every cell [sft | dpo | rm]
        #[arg(long, value_name = "STAGE")]
        stage: Stage,
        /// Grid file [TOML; default: lr {1e-4,3e-4,1e-3,3e-3} × batch {4,8,16,32} × seeds {0,1}]
        #[arg(long, value_name = "FILE")]
        grid: Option<PathBuf>,
        /// Tasks, comma separated [copy, modchain; default: the grid's list, else both]
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        tasks: Vec<TaskKind>,
        /// Base checkpoint every cell starts from [path; default: random init from the grid's [model]]
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
        /// Run every cell with this single seed instead of the grid's seed list [integer]
        #[arg(long, value_name = "SEED")]
        seed: Option<u64>,
        /// Worker threads [count; default: available cores]
        #[arg(long, value_name = "N")]
        threads: Option<usize>,
        /// Run directory [path; default: $POSTTRAIN_OUT_ROOT/sweep, else runs/sweep]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Dataset audits
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Generate a synthetic task (train/eval splits, SFT and pair files)
    GenTask {
        /// Task family [modchain | copy]
        #[arg(long, value_name = "KIND")]
        kind: TaskKind,
        /// Training instances [count]
        #[arg(long, value_name = "N")]
        train_size: usize,
        /// Evaluation instances [count]
        #[arg(long, value_name = "N")]
        eval_size: usize,
        /// Generation seed [integer]
        #[arg(long, value_name = "SEED", default_value_t = 0)]
        seed: u64,
        /// Shortest instance [operands for modchain, payload letters for copy]
        #[arg(long, value_name = "N", default_value_t = 2)]
        min_len: usize,
        /// Longest instance [operands for modchain, payload letters for copy]
        #[arg(long, value_name = "N", default_value_t = 4)]
        max_len: usize,
        /// Output directory [path; default: $POSTTRAIN_OUT_ROOT/gen-task, else runs/gen-task]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Greedy exact-match accuracy of a checkpoint on a generated task
    Eval {
        /// Checkpoint [path]
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        /// Task directory written by gen-task [path]
        #[arg(long, value_name = "DIR")]
        task: PathBuf,
        /// Also write eval.json and a manifest here [path]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Check dataset, config, grid and checkpoint files without training
    Validate {
        /// SFT files [JSON lines]
        #[arg(long, value_name = "FILE")]
        sft: Vec<PathBuf>,
        /// Preference-pair files [JSON lines]
        #[arg(long, value_name = "FILE")]
        pairs: Vec<PathBuf>,
        /// Run configuration files [TOML]
        #[arg(long, value_name = "FILE")]
        config: Vec<PathBuf>,
        /// Sweep grid files [TOML]
        #[arg(long, value_name = "FILE")]
        grid: Vec<PathBuf>,
        /// Model checkpoints [binary container]
        #[arg(long, value_name = "CKPT")]
        ckpt: Vec<PathBuf>,
    },
    /// Rerun a recorded run and verify its deterministic artifacts are bit-identical
    Replay {
        /// Manifest of the original run [path to manifest.json]
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Directory for the rerun [path; default: <original run>/replay]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum AuditCommand {
    /// Share of benchmark items sharing at least one word n-gram with the training corpus
    Contamination {
        /// Training corpora [JSON lines; repeatable]
        #[arg(long, value_name = "FILE", required = true, num_args = 1..)]
        train: Vec<PathBuf>,
        /// Benchmarks, one table row each [JSON lines; repeatable]
        #[arg(long, value_name = "FILE", required = true, num_args = 1..)]
        bench: Vec<PathBuf>,
        /// N-gram length [normalized words]
        #[arg(long, value_name = "N", default_value_t = DEFAULT_N)]
        n: usize,
        /// Store exact n-grams instead of 64-bit hashes (no false hits, more memory)
        #[arg(long)]
        exact: bool,
        /// Record fields holding text, comma separated [field names; conversations always use their messages]
        #[arg(long, value_name = "LIST", value_delimiter = ',', default_value = "text")]
        text_field: Vec<String>,
        /// Record field holding the item id [field name]
        #[arg(long, value_name = "NAME", default_value = "id")]
        id_field: String,
        /// Print JSON instead of the table
        #[arg(long)]
        json: bool,
        /// Also write contamination.json/.txt and a manifest here [path]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Per-document language distribution
    Languages {
        /// Corpora [JSON lines; repeatable]
        #[arg(long, value_name = "FILE", required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Record fields holding text, comma separated [field names]
        #[arg(long, value_name = "LIST", value_delimiter = ',', default_value = "text")]
        text_field: Vec<String>,
        /// Print JSON instead of the table
        #[arg(long)]
        json: bool,
        /// Also write languages.json and a manifest here [path]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

/// A fully resolved command: config files merged with overrides and
/// paths made absolute. This is what a manifest records and what replay
/// executes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    Sft {
        data: PathBuf,
        init: Option<PathBuf>,
        config: RunConfig,
    },
    Dpo {
        pairs: PathBuf,
        init: PathBuf,
        config: RunConfig,
    },
    Rm {
        pairs: PathBuf,
        init: Option<PathBuf>,
        config: RunConfig,
    },
    RmEval {
        rm: PathBuf,
        pairs: PathBuf,
        max_seq_len: usize,
    },
    Sweep {
        grid: SweepGrid,
        init: Option<PathBuf>,
        threads: usize,
    },
    GenTask {
        spec: TaskSpec,
    },
    Eval {
        ckpt: PathBuf,
        task: PathBuf,
    },
    AuditContamination {
        train: Vec<PathBuf>,
        bench: Vec<PathBuf>,
        n: usize,
        exact: bool,
        fields: FieldMap,
        json: bool,
    },
    AuditLanguages {
        data: Vec<PathBuf>,
        fields: FieldMap,
        json: bool,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Sft { .. } => "sft",
            Invocation::Dpo { .. } => "dpo",
            Invocation::Rm { .. } => "rm",
            Invocation::RmEval { .. } => "rm-eval",
            Invocation::Sweep { .. } => "sweep",
            Invocation::GenTask { .. } => "gen-task",
            Invocation::Eval { .. } => "eval",
            Invocation::AuditContamination { .. } => "audit-contamination",
            Invocation::AuditLanguages { .. } => "audit-languages",
        }
    }

    /// Files the command reads.
    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Invocation::Sft { data, init, .. } => [Some(data.clone()), init.clone()].into_iter().flatten().collect(),
            Invocation::Dpo { pairs, init, .. } => vec![pairs.clone(), init.clone()],
            Invocation::Rm { pairs, init, .. } => [Some(pairs.clone()), init.clone()].into_iter().flatten().collect(),
            Invocation::RmEval { rm, pairs, .. } => vec![rm.clone(), pairs.clone()],
            Invocation::Sweep { init, .. } => init.iter().cloned().collect(),
            Invocation::GenTask { .. } => Vec::new(),
            Invocation::Eval { ckpt, task } => vec![ckpt.clone(), task.join(TASK_FILE)],
            Invocation::AuditContamination { train, bench, .. } => train.iter().chain(bench).cloned().collect(),
            Invocation::AuditLanguages { data, .. } => data.clone(),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Invocation::Sft { config, .. } | Invocation::Dpo { config, .. } | Invocation::Rm { config, .. } => Some(config.train.seed),
            Invocation::Sweep { grid, .. } => grid.seeds.first().copied(),
            Invocation::GenTask { spec } => Some(spec.seed),
            _ => None,
        }
    }
}

const TASK_FILE: &str = "task.json";

/// Files written by a command plus the text it prints.
#[derive(Debug, Default)]
pub struct Outcome {
    /// (path relative to the run directory, deterministic?)
    pub artifacts: Vec<(PathBuf, bool)>,
    pub report: String,
}

/// Result of a recorded run.
#[derive(Debug)]
pub struct RunOutput {
    pub report: String,
    pub run_dir: Option<PathBuf>,
    pub manifest: Option<RunManifest<Invocation>>,
}

fn abs(p: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(p).map_err(|e| CliError::new(Category::Io, format!("{}: {e}", p.display())))
}

fn default_out(command: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from);
    root.join(command)
}

fn warn_diagnostics(path: &Path, diags: &[Diagnostic]) {
    if let Some(first) = diags.first() {
        eprintln!("warning: {}: skipped {} malformed line(s); first: {first}", path.display(), diags.len());
    }
}

fn progress(label: &'static str, total: usize) -> impl FnMut(&StepRecord) {
    let every = (total / 20).max(1) as u64;
    move |r: &StepRecord| {
        if r.step.is_multiple_of(every) || r.step as usize == total {
            eprintln!("{label}: step {}/{total} lr={:.3e} loss={:.4} grad_norm={:.3}", r.step, r.lr, r.loss, r.grad_norm);
        }
    }
}

fn check_context(train: &TrainConfig, model: &ModelConfig) -> Result<(), CliError> {
    if train.max_seq_len > model.max_seq_len {
        return Err(CliError::new(
            Category::Config,
            format!("train.max_seq_len {} exceeds the model context of {} tokens", train.max_seq_len, model.max_seq_len),
        ));
    }
    Ok(())
}

fn base_model(init: Option<&Path>, model: &ModelConfig) -> Result<ModelCheckpoint, CliError> {
    Ok(match init {
        Some(p) => load_checkpoint(p)?,
        None => ModelCheckpoint::init(model.clone())?,
    })
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
    let body = serde_json::to_string_pretty(value).expect("artifact serializes");
    write_atomic(&dir.join(name), body.as_bytes())?;
    Ok(PathBuf::from(name))
}

fn write_text(dir: &Path, name: &str, body: &str) -> Result<PathBuf, CliError> {
    write_atomic(&dir.join(name), body.as_bytes())?;
    Ok(PathBuf::from(name))
}

/// Writes the train log, summary and resolved config; returns the artifact
/// list including `ckpt_name`.
fn finish_training(
    dir: &Path,
    ckpt_name: &str,
    records: Vec<StepRecord>,
    started: Instant,
    config: RunConfig,
) -> Result<Vec<(PathBuf, bool)>, CliError> {
    let config_file = write_text(dir, "config.toml", &config.to_toml())?;
    let log = TrainLog {
        records,
        wall_time_secs: started.elapsed().as_secs_f64(),
        checkpoint: Some(dir.join(ckpt_name)),
        config,
    };
    log.write(dir)?;
    Ok(vec![
        (PathBuf::from(ckpt_name), true),
        (config_file, true),
        (PathBuf::from("train_log.jsonl"), true),
        (PathBuf::from("summary.json"), false),
    ])
}

fn loss_line(records: &[StepRecord]) -> String {
    match (records.first(), records.last()) {
        (Some(a), Some(b)) => format!("{} steps, loss {:.4} -> {:.4}", records.len(), a.loss, b.loss),
        _ => "0 steps".into(),
    }
}

fn categories(records: &[PairRecord]) -> Option<Vec<String>> {
    records
        .iter()
        .any(|r| r.category.is_some())
        .then(|| records.iter().map(|r| r.category.clone().unwrap_or_else(|| "uncategorized".into())).collect())
}

fn rm_report_text(report: &RmReport) -> String {
    let mut s = format!("accuracy {:.4} over {} pairs\n", report.overall, report.n_pairs);
    for (cat, acc) in &report.per_category {
        s.push_str(&format!("  {cat}: {acc:.4}\n"));
    }
    s
}

#[derive(Serialize)]
struct RmEvalJson<'a> {
    overall: f64,
    n_pairs: usize,
    per_category: &'a std::collections::BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct Environment {
    os: &'static str,
    arch: &'static str,
    threads: usize,
    available_parallelism: usize,
    code_version: String,
    base_fingerprint: String,
}

#[derive(Serialize)]
struct SweepJson<'a> {
    grid: &'a SweepGrid,
    environment: Environment,
    cells: &'a [crate::sweep::Cell],
}

#[derive(Serialize)]
struct EvalJson {
    metric: &'static str,
    value: f64,
    n_items: usize,
    task: TaskSpec,
}

impl Invocation {
    /// Runs the command. `dir` is the run directory (required for
    /// training commands, optional for reports).
    pub fn execute(&self, dir: Option<&Path>) -> Result<Outcome, CliError> {
        let need_dir = || dir.ok_or_else(|| CliError::new(Category::Usage, "this command needs an output directory"));
        match self {
            Invocation::Sft { data, init, config } => {
                let dir = need_dir()?;
                let loaded = load_sft(data)?;
                warn_diagnostics(data, &loaded.diagnostics);
                let base = base_model(init.as_deref(), &config.model)?;
                check_context(&config.train, base.config())?;
                let started = Instant::now();
                let total = config.train.total_steps(loaded.items.len());
                let (model, records) = train_sft(&base, &loaded.items, &config.train, progress("sft", total))?;
                save_checkpoint(&model, &dir.join("model.ckpt"))?;
                let report = format!("sft: {}; checkpoint {}\n", loss_line(&records), dir.join("model.ckpt").display());
                let resolved = RunConfig {
                    model: base.config().clone(),
                    train: config.train.clone(),
                };
                let artifacts = finish_training(dir, "model.ckpt", records, started, resolved)?;
                Ok(Outcome { artifacts, report })
            }
            Invocation::Dpo { pairs, init, config } => {
                let dir = need_dir()?;
                let loaded = load_pairs(pairs)?;
                warn_diagnostics(pairs, &loaded.diagnostics);
                let pairs: Vec<_> = loaded.items.into_iter().map(|r| r.pair).collect();
                let sft = load_checkpoint(init)?;
                check_context(&config.train, sft.config())?;
                let started = Instant::now();
                let total = config.train.total_steps(pairs.len());
                let (model, cache, records) = train_dpo(&sft, &pairs, &config.train, progress("dpo", total))?;
                save_checkpoint(&model, &dir.join("model.ckpt"))?;
                save_ref_cache(&cache, &dir.join("ref_cache.bin"))?;
                let stats = pair_stats(&model, &pairs, &cache)?;
                let mut report = format!(
                    "dpo: {}; train pairs: mean margin {:.4}, accuracy {:.4} (n={})\n",
                    loss_line(&records),
                    stats.mean_margin,
                    stats.accuracy,
                    stats.n
                );
                if !cache.excluded.is_empty() {
                    report.push_str(&format!("dpo: {} pair(s) exceed the context and were excluded\n", cache.excluded.len()));
                }
                let resolved = RunConfig {
                    model: sft.config().clone(),
                    train: config.train.clone(),
                };
                let mut artifacts = finish_training(dir, "model.ckpt", records, started, resolved)?;
                artifacts.push((PathBuf::from("ref_cache.bin"), true));
                Ok(Outcome { artifacts, report })
            }
            Invocation::Rm { pairs, init, config } => {
                let dir = need_dir()?;
                let loaded = load_pairs(pairs)?;
                warn_diagnostics(pairs, &loaded.diagnostics);
                let cats = categories(&loaded.items);
                let pairs: Vec<_> = loaded.items.into_iter().map(|r| r.pair).collect();
                let base = base_model(init.as_deref(), &config.model)?;
                check_context(&config.train, base.config())?;
                let started = Instant::now();
                let total = config.train.total_steps(pairs.len());
                let (rm, records) = train_rm(&base, &pairs, &config.train, progress("rm", total))?;
                save_reward_model(&rm, &dir.join("reward.ckpt"))?;
                let acc = rm_accuracy(&rm, &pairs, cats.as_deref(), config.train.max_seq_len)?;
                let report = format!("rm: {}; train {}", loss_line(&records), rm_report_text(&acc));
                let resolved = RunConfig {
                    model: base.config().clone(),
                    train: config.train.clone(),
                };
                let artifacts = finish_training(dir, "reward.ckpt", records, started, resolved)?;
                Ok(Outcome { artifacts, report })
            }
            Invocation::RmEval { rm, pairs, max_seq_len } => {
                let loaded = load_pairs(pairs)?;
                warn_diagnostics(pairs, &loaded.diagnostics);
                let cats = categories(&loaded.items);
                let pairs: Vec<_> = loaded.items.into_iter().map(|r| r.pair).collect();
                let model = load_reward_model(rm)?;
                let acc = rm_accuracy(&model, &pairs, cats.as_deref(), *max_seq_len)?;
                let mut artifacts = Vec::new();
                if let Some(dir) = dir {
                    let json = RmEvalJson {
                        overall: acc.overall,
                        n_pairs: acc.n_pairs,
                        per_category: &acc.per_category,
                    };
                    artifacts.push((write_json(dir, "rm_eval.json", &json)?, true));
                }
                Ok(Outcome {
                    artifacts,
                    report: rm_report_text(&acc),
                })
            }
            Invocation::Sweep { grid, init, threads } => {
                let dir = need_dir()?;
                let base = base_model(init.as_deref(), &grid.model)?;
                check_context(&grid.train, base.config())?;
                let result = run_sweep(grid, &base, *threads)?;
                let mut artifacts = vec![(write_text(dir, "contour.csv", &contour_csv(&result.rows()))?, true)];
                let env = Environment {
                    os: std::env::consts::OS,
                    arch: std::env::consts::ARCH,
                    threads: *threads,
                    available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
                    code_version: code_version(),
                    base_fingerprint: result.base_fingerprint.clone(),
                };
                let json = SweepJson {
                    grid,
                    environment: env,
                    cells: &result.cells,
                };
                artifacts.push((write_json(dir, "sweep.json", &json)?, false));
                let failed = result.cells.iter().filter(|c| c.error.is_some()).count();
                let mut report = format!("sweep: {} cells ({failed} failed); contour {}\n", result.cells.len(), dir.join("contour.csv").display());
                match ratio_analysis(&result.rows()) {
                    Ok(analysis) => {
                        artifacts.push((write_json(dir, "analysis.json", &analysis)?, true));
                        for a in &analysis {
                            match &a.best {
                                Some(b) => report.push_str(&format!(
                                    "{}: best lr={:e} batch_size={} ratio={:e} mean {}={:.4}; spearman(log ratio, metric)={:+.3}{}\n",
                                    a.task,
                                    b.lr,
                                    b.batch_size,
                                    b.ratio,
                                    grid.stage.metric(),
                                    b.mean_metric,
                                    a.correlation,
                                    if a.degenerate { " (degenerate: all metrics equal)" } else { "" }
                                )),
                                None => report.push_str(&format!("{}: no finite cells\n", a.task)),
                            }
                        }
                    }
                    Err(e) => report.push_str(&format!("sweep: ratio analysis skipped: {e}\n")),
                }
                Ok(Outcome { artifacts, report })
            }
            Invocation::GenTask { spec } => {
                let dir = need_dir()?;
                let data = gen_task(spec)?;
                let lines = |v: Vec<String>| v.into_iter().map(|l| l + "\n").collect::<String>();
                let sft = lines(data.train.iter().map(|it| raw_sft_line(&it.prompt, &it.gold)).collect());
                let bench = lines(
                    data.eval
                        .iter()
                        .enumerate()
                        .map(|(i, it)| {
                            serde_json::json!({
                                "id": format!("eval-{i}"),
                                "prompt": it.prompt,
                                "gold": it.gold,
                                "text": format!("{}{}", it.prompt, it.gold),
                            })
                            .to_string()
                        })
                        .collect(),
                );
                let train_pairs = task_preference_pairs(spec.kind, &data.train, spec.seed);
                let eval_pairs = task_preference_pairs(spec.kind, &data.eval, spec.seed ^ 1);
                let artifacts = vec![
                    (write_json(dir, TASK_FILE, &data)?, true),
                    (write_text(dir, "train_sft.jsonl", &sft)?, true),
                    (write_text(dir, "eval_bench.jsonl", &bench)?, true),
                    (write_text(dir, "train_pairs.jsonl", &lines(train_pairs.iter().map(raw_pair_line).collect()))?, true),
                    (write_text(dir, "eval_pairs.jsonl", &lines(eval_pairs.iter().map(raw_pair_line).collect()))?, true),
                ];
                let report = format!(
                    "gen-task: {} train / {} eval {} instances in {}\n",
                    data.train.len(),
                    data.eval.len(),
                    spec.kind,
                    dir.display()
                );
                Ok(Outcome { artifacts, report })
            }
            Invocation::Eval { ckpt, task } => {
                let model = load_checkpoint(ckpt)?;
                let path = task.join(TASK_FILE);
                let data: TaskData = serde_json::from_str(&read_text(&path)?)
                    .map_err(|e| CliError::new(Category::Data, format!("{}: {e}", path.display())))?;
                let value = evaluate(&model, &data.eval)?;
                let mut artifacts = Vec::new();
                if let Some(dir) = dir {
                    let json = EvalJson {
                        metric: "exact_match",
                        value,
                        n_items: data.eval.len(),
                        task: data.spec.clone(),
                    };
                    artifacts.push((write_json(dir, "eval.json", &json)?, true));
                }
                Ok(Outcome {
                    artifacts,
                    report: format!("exact_match {value:.4} on {} {} items\n", data.eval.len(), data.spec.kind),
                })
            }
            Invocation::AuditContamination {
                train,
                bench,
                n,
                exact,
                fields,
                json,
            } => {
                let mode = if *exact { IndexMode::Exact } else { IndexMode::Hashed };
                let report = audit_report(train, bench, *n, mode, fields, fields)?;
                let text = report.render_text();
                let mut artifacts = Vec::new();
                if let Some(dir) = dir {
                    artifacts.push((write_text(dir, "contamination.json", &report.to_json())?, true));
                    artifacts.push((write_text(dir, "contamination.txt", &text)?, true));
                }
                Ok(Outcome {
                    artifacts,
                    report: if *json { report.to_json() + "\n" } else { text },
                })
            }
            Invocation::AuditLanguages { data, fields, json } => {
                let mut docs = Vec::new();
                for p in data {
                    docs.extend(load_corpus(p, fields)?);
                }
                if docs.is_empty() {
                    return Err(CliError::new(Category::Data, "no documents to classify"));
                }
                let shares = language_distribution(docs.iter().map(|d| d.text.as_str()), &HeuristicDetector::default());
                let mut artifacts = Vec::new();
                if let Some(dir) = dir {
                    artifacts.push((write_json(dir, "languages.json", &shares)?, true));
                }
                let report = if *json {
                    serde_json::to_string_pretty(&shares).expect("shares serialize") + "\n"
                } else {
                    let mut s = format!("# documents={} detector=heuristic-script-stopword\n{:<10}  {:>8}  {:>8}\n", docs.len(), "Language", "Docs", "Share");
                    for sh in &shares {
                        s.push_str(&format!("{:<10}  {:>8}  {:>7}%\n", sh.language, sh.count, sh.percent));
                    }
                    s
                };
                Ok(Outcome { artifacts, report })
            }
        }
    }
}

/// Executes `inv`, writing artifacts and a manifest into `dir` when given.
pub fn run_recorded(inv: &Invocation, dir: Option<&Path>) -> Result<RunOutput, CliError> {
    let started_unix = unix_now();
    let inputs = inv
        .inputs()
        .iter()
        .map(|p| FileDigest::of(p))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| CliError::from(IoError::fs(d, e)))?;
    }
    let outcome = inv.execute(dir)?;
    let Some(dir) = dir else {
        return Ok(RunOutput {
            report: outcome.report,
            run_dir: None,
            manifest: None,
        });
    };
    let artifacts = outcome
        .artifacts
        .iter()
        .map(|(rel, deterministic)| {
            Ok(Artifact {
                path: rel.clone(),
                sha256: file_sha256(&dir.join(rel))?,
                deterministic: *deterministic,
            })
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    let manifest = RunManifest {
        subcommand: inv.name().into(),
        invocation: inv.clone(),
        inputs,
        code_version: code_version(),
        seed: inv.seed(),
        started_unix,
        finished_unix: unix_now(),
        artifacts,
    };
    manifest.write(dir)?;
    Ok(RunOutput {
        report: outcome.report,
        run_dir: Some(dir.to_path_buf()),
        manifest: Some(manifest),
    })
}

/// Reruns the run recorded at `manifest_path` into `out` and checks that
/// every deterministic artifact is byte-identical.
pub fn replay(manifest_path: &Path, out: Option<&Path>) -> Result<RunOutput, CliError> {
    let original: RunManifest<Invocation> = RunManifest::load(manifest_path)?
        .map_err(|e| CliError::new(Category::Corrupt, format!("{}: {e}", manifest_path.display())))?;
    let changed = changed_inputs(&original.inputs)?;
    if !changed.is_empty() {
        let list: Vec<String> = changed.iter().map(|p| p.display().to_string()).collect();
        return Err(CliError::new(Category::Verification, format!("inputs changed since the run: {}", list.join(", "))));
    }
    let out = match out {
        Some(o) => abs(o)?,
        None => abs(&manifest_path.parent().unwrap_or(Path::new(".")).join("replay"))?,
    };
    if out.join(MANIFEST_FILE) == abs(manifest_path)? {
        return Err(CliError::new(Category::Usage, "replay directory must differ from the original run directory"));
    }
    let rerun = run_recorded(&original.invocation, Some(&out))?;
    let replayed = rerun.manifest.as_ref().map_or(&[][..], |m| &m.artifacts[..]);
    let mismatched = artifact_mismatches(&original.artifacts, replayed);
    if !mismatched.is_empty() {
        let list: Vec<String> = mismatched.iter().map(|p| p.display().to_string()).collect();
        return Err(CliError::new(Category::Verification, format!("artifacts differ from the recorded run: {}", list.join(", "))));
    }
    let n = original.artifacts.iter().filter(|a| a.deterministic).count();
    Ok(RunOutput {
        report: format!("replay ok: {n} deterministic artifact(s) bit-identical in {}\n", out.display()),
        ..rerun
    })
}

fn validate_files(sft: &[PathBuf], pairs: &[PathBuf], config: &[PathBuf], grid: &[PathBuf], ckpt: &[PathBuf]) -> Result<String, CliError> {
    let mut report = String::new();
    let mut bad = 0usize;
    let mut note = |path: &Path, n: usize, diags: &[Diagnostic]| {
        report.push_str(&format!("{}: {n} valid record(s), {} malformed\n", path.display(), diags.len()));
        for d in diags {
            report.push_str(&format!("  {d}\n"));
        }
        bad += diags.len();
    };
    for p in sft {
        let l = load_sft(p)?;
        note(p, l.items.len(), &l.diagnostics);
    }
    for p in pairs {
        let l = load_pairs(p)?;
        note(p, l.items.len(), &l.diagnostics);
    }
    for p in config {
        RunConfig::load(p)?.validate()?;
        report.push_str(&format!("{}: config ok\n", p.display()));
    }
    for p in grid {
        let g = SweepGrid::load(p)?;
        let mut check = g.clone();
        if check.tasks.is_empty() {
            check.tasks = vec![TaskKind::Copy];
        }
        check.validate()?;
        report.push_str(&format!("{}: grid ok ({} lr × {} batch sizes × {} seeds)\n", p.display(), g.lr.len(), g.batch_size.len(), g.seeds.len()));
    }
    for p in ckpt {
        let m = load_checkpoint(p)?;
        report.push_str(&format!("{}: checkpoint ok (role {}, step {}, {} parameters)\n", p.display(), m.role, m.step, m.config().param_count()));
    }
    if bad > 0 {
        return Err(CliError::new(Category::Data, format!("{bad} malformed record(s)\n{report}")));
    }
    Ok(report)
}

fn resolve_config(flags: &TrainFlags) -> Result<RunConfig, CliError> {
    let path = flags.config.as_deref().map(abs).transpose()?;
    Ok(RunConfig::resolve(path.as_deref(), &flags.overrides())?)
}

fn out_dir(out: Option<&Path>, command: &str) -> Result<PathBuf, CliError> {
    abs(&out.map_or_else(|| default_out(command), Path::to_path_buf))
}

fn opt_abs(p: Option<&PathBuf>) -> Result<Option<PathBuf>, CliError> {
    p.map(|p| abs(p)).transpose()
}

fn all_abs(ps: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    ps.iter().map(|p| abs(p)).collect()
}

/// Resolves a parsed command line into an invocation and its run
/// directory (`None` for report-only runs without `--out`).
pub fn resolve(command: &Command) -> Result<(Invocation, Option<PathBuf>), CliError> {
    Ok(match command {
        Command::Sft { data, init, train } => (
            Invocation::Sft {
                data: abs(data)?,
                init: opt_abs(init.as_ref())?,
                config: resolve_config(train)?,
            },
            Some(out_dir(train.out.as_deref(), "sft")?),
        ),
        Command::Dpo { pairs, init, train } => (
            Invocation::Dpo {
                pairs: abs(pairs)?,
                init: abs(init)?,
                config: resolve_config(train)?,
            },
            Some(out_dir(train.out.as_deref(), "dpo")?),
        ),
        Command::Rm { pairs, init, train } => (
            Invocation::Rm {
                pairs: abs(pairs)?,
                init: opt_abs(init.as_ref())?,
                config: resolve_config(train)?,
            },
            Some(out_dir(train.out.as_deref(), "rm")?),
        ),
        Command::RmEval { rm, pairs, max_seq_len, out } => (
            Invocation::RmEval {
                rm: abs(rm)?,
                pairs: abs(pairs)?,
                max_seq_len: *max_seq_len,
            },
            opt_abs(out.as_ref())?,
        ),
        Command::Sweep {
            stage,
            grid,
            tasks,
            init,
            seed,
            threads,
            out,
        } => {
            let mut g = match grid {
                Some(p) => SweepGrid::load(&abs(p)?)?,
                None => SweepGrid::default_for(*stage, Vec::new()),
            };
            g.stage = *stage;
            if !tasks.is_empty() {
                g.tasks = tasks.clone();
            }
            if g.tasks.is_empty() {
                g.tasks = vec![TaskKind::Copy, TaskKind::ModChain];
            }
            if let Some(s) = seed {
                g.seeds = vec![*s];
            }
            g.validate()?;
            let threads = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            if threads == 0 {
                return Err(CliError::new(Category::Config, "--threads must be at least 1"));
            }
            (
                Invocation::Sweep {
                    grid: g,
                    init: opt_abs(init.as_ref())?,
                    threads,
                },
                Some(out_dir(out.as_deref(), "sweep")?),
            )
        }
        Command::GenTask {
            kind,
            train_size,
            eval_size,
            seed,
            min_len,
            max_len,
            out,
        } => (
            Invocation::GenTask {
                spec: TaskSpec {
                    kind: *kind,
                    train_size: *train_size,
                    eval_size: *eval_size,
                    min_len: *min_len,
                    max_len: *max_len,
                    seed: *seed,
                },
            },
            Some(out_dir(out.as_deref(), "gen-task")?),
        ),
        Command::Eval { ckpt, task, out } => (
            Invocation::Eval {
                ckpt: abs(ckpt)?,
                task: abs(task)?,
            },
            opt_abs(out.as_ref())?,
        ),
        Command::Audit(AuditCommand::Contamination {
            train,
            bench,
            n,
            exact,
            text_field,
            id_field,
            json,
            out,
        }) => (
            Invocation::AuditContamination {
                train: all_abs(train)?,
                bench: all_abs(bench)?,
                n: *n,
                exact: *exact,
                fields: FieldMap {
                    id: id_field.clone(),
                    text: text_field.clone(),
                },
                json: *json,
            },
            opt_abs(out.as_ref())?,
        ),
        Command::Audit(AuditCommand::Languages { data, text_field, json, out }) => (
            Invocation::AuditLanguages {
                data: all_abs(data)?,
                fields: FieldMap {
                    id: "id".into(),
                    text: text_field.clone(),
                },
                json: *json,
            },
            opt_abs(out.as_ref())?,
        ),
        Command::Validate { .. } | Command::Replay { .. } => {
            return Err(CliError::new(Category::Usage, "validate and replay are not recorded runs"))
        }
    })
}

/// Runs a parsed command line and returns the text to print on stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Validate {
            sft,
            pairs,
            config,
            grid,
            ckpt,
        } => validate_files(sft, pairs, config, grid, ckpt),
        Command::Replay { manifest, out } => Ok(replay(manifest, out.as_deref())?.report),
        other => {
            let (inv, dir) = resolve(other)?;
            let output = run_recorded(&inv, dir.as_deref())?;
            let mut report = output.report;
            if let Some(d) = output.run_dir {
                report.push_str(&format!("manifest: {}\n", d.join(MANIFEST_FILE).display()));
            }
            Ok(report)
        }
    }
}

/// Parses `args` (including the program name), runs, and returns the
/// process exit code, printing the report to stdout and any error as one
/// line on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                print!("{e}");
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { Category::Usage.exit_code() } else { 0 };
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::new(Category::Usage, first).line());
            return Category::Usage.exit_code();
        }
    };
    match run(&cli) {
        Ok(report) => {
            print!("{report}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.line());
            e.category.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let all = [
            Category::Usage,
            Category::Config,
            Category::Io,
            Category::Data,
            Category::Training,
            Category::Corrupt,
            Category::Verification,
        ];
        let mut codes: Vec<i32> = all.iter().map(|c| c.exit_code()).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), all.len());
        assert!(!codes.contains(&0) && !codes.contains(&1));
    }

    #[test]
    fn error_line_is_single_line() {
        let e = CliError::new(Category::Data, "two\nlines");
        assert_eq!(e.line(), "error[data]: two lines");
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn every_flag_documents_units_or_meaning() {
        use clap::CommandFactory;
        fn walk(cmd: &clap::Command) {
            for arg in cmd.get_arguments() {
                if ["help", "version"].contains(&arg.get_id().as_str()) {
                    continue;
                }
                assert!(arg.get_help().is_some(), "{} --{} has no help", cmd.get_name(), arg.get_id());
            }
            for sub in cmd.get_subcommands() {
                walk(sub);
            }
        }
        walk(&Cli::command());
    }
}
