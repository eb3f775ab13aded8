//! Learning-rate × batch-size sweeps: independent per-cell training and
//! evaluation, contour CSV emission, and LR/BS-ratio analysis.
//!
//! Grid file (TOML):
//!
//! ```toml
//! stage = "sft"                      # sft | dpo | rm (default sft)
//! lr = [1e-4, 3e-4, 1e-3, 3e-3]      # peak learning rates, ascending
//! batch_size = [4, 8, 16, 32]        # examples per step, ascending
//! seeds = [0, 1]
//! tasks = ["copy", "modchain"]
//!
//! [task]                             # synthetic task sizes
//! train_size = 512
//! eval_size = 100
//! seed = 0
//!
//! [model]                            # used when no base checkpoint is given
//! d_model = 32
//!
//! [train]                            # base config; lr, batch size and seed vary per cell
//! warmup_ratio = 0.1
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use posttrain_core::data::{PreferencePair, SftExample};
use posttrain_core::dpo::{cache_ref_logprobs, train_dpo_cached, RefLogpCache};
use posttrain_core::model::{ModelCheckpoint, ModelConfig, Role};
use posttrain_core::rm::{rm_accuracy, train_rm};
use posttrain_core::sft::train_sft;
use posttrain_core::tasks::{evaluate, gen_task, task_preference_pairs, EvalItem, TaskKind, TaskSpec};
use posttrain_core::train::{lr_bs_ratio, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{read_text, IoError};

pub const CSV_HEADER: [&str; 7] = ["lr", "batch_size", "ratio", "task", "seed", "metric", "value"];

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("contour CSV: {0}")]
    Csv(String),
    #[error("ratio analysis needs at least two distinct LR/BS ratios for task {0}")]
    TooFewRatios(String),
    #[error("setup failed: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Sft,
    Dpo,
    Rm,
}

impl Stage {
    pub fn metric(self) -> &'static str {
        match self {
            Stage::Sft | Stage::Dpo => "exact_match",
            Stage::Rm => "pair_accuracy",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = SweepError;

    fn from_str(s: &str) -> Result<Self, SweepError> {
        match s {
            "sft" => Ok(Stage::Sft),
            "dpo" => Ok(Stage::Dpo),
            "rm" => Ok(Stage::Rm),
            other => Err(SweepError::Grid(format!("unknown stage {other:?} (expected sft, dpo or rm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSizes {
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for TaskSizes {
    fn default() -> Self {
        Self {
            train_size: 512,
            eval_size: 100,
            seed: 0,
            min_len: 2,
            max_len: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub stage: Stage,
    pub lr: Vec<f64>,
    pub batch_size: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub tasks: Vec<TaskKind>,
    #[serde(default)]
    pub task: TaskSizes,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1]
}

impl SweepGrid {
    /// The desk-scale default grid for `stage`.
    pub fn default_for(stage: Stage, tasks: Vec<TaskKind>) -> Self {
        Self {
            stage,
            lr: vec![1e-4, 3e-4, 1e-3, 3e-3],
            batch_size: vec![4, 8, 16, 32],
            seeds: default_seeds(),
            tasks,
            task: TaskSizes::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, SweepError> {
        toml::from_str(text).map_err(|e| SweepError::Grid(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SweepError> {
        Self::parse(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        let fail = |m: &str| Err(SweepError::Grid(m.into()));
        if self.lr.is_empty() || self.batch_size.is_empty() || self.seeds.is_empty() || self.tasks.is_empty() {
            return fail("lr, batch_size, seeds and tasks must all be non-empty");
        }
        if self.lr.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return fail("every lr must be a positive finite number");
        }
        if self.batch_size.contains(&0) {
            return fail("every batch_size must be >= 1");
        }
        if !self.lr.windows(2).all(|w| w[0] < w[1]) || !self.batch_size.windows(2).all(|w| w[0] < w[1]) {
            return fail("lr and batch_size must be strictly ascending");
        }
        let mut tasks = self.tasks.clone();
        tasks.sort();
        tasks.dedup();
        if tasks.len() != self.tasks.len() {
            return fail("tasks must not repeat");
        }
        self.train.validate().map_err(|e| SweepError::Grid(e.to_string()))?;
        self.model.validate().map_err(|e| SweepError::Grid(e.to_string()))?;
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.lr.len() * self.batch_size.len() * self.seeds.len() * self.tasks.len()
    }

    /// Cell coordinates in grid-index order: task, lr, batch size, seed.
    pub fn coordinates(&self) -> Vec<(TaskKind, f64, usize, u64)> {
        let mut out = Vec::with_capacity(self.n_cells());
        for &task in &self.tasks {
            for &lr in &self.lr {
                for &bs in &self.batch_size {
                    for &seed in &self.seeds {
                        out.push((task, lr, bs, seed));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub lr: f64,
    pub batch_size: usize,
    pub ratio: f64,
    pub task: TaskKind,
    pub seed: u64,
    pub metric: String,
    /// NaN when the cell failed.
    pub value: f64,
    pub steps: usize,
    pub wall_time_secs: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: SweepGrid,
    pub base_fingerprint: String,
    pub cells: Vec<Cell>,
}

/// One contour-CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourRow {
    pub lr: f64,
    pub batch_size: usize,
    pub ratio: f64,
    pub task: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

impl ContourRow {
    /// Equality that treats NaN values as equal to each other.
    pub fn same_as(&self, other: &ContourRow) -> bool {
        let feq = |a: f64, b: f64| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan());
        feq(self.lr, other.lr)
            && self.batch_size == other.batch_size
            && feq(self.ratio, other.ratio)
            && self.task == other.task
            && self.seed == other.seed
            && self.metric == other.metric
            && feq(self.value, other.value)
    }
}

impl SweepResult {
    /// Contour rows sorted by (task, lr, batch size, seed).
    pub fn rows(&self) -> Vec<ContourRow> {
        let mut rows: Vec<ContourRow> = self
            .cells
            .iter()
            .map(|c| ContourRow {
                lr: c.lr,
                batch_size: c.batch_size,
                ratio: c.ratio,
                task: c.task.to_string(),
                seed: c.seed,
                metric: c.metric.clone(),
                value: c.value,
            })
            .collect();
        rows.sort_by(|a, b| {
            a.task
                .cmp(&b.task)
                .then(a.lr.total_cmp(&b.lr))
                .then(a.batch_size.cmp(&b.batch_size))
                .then(a.seed.cmp(&b.seed))
        });
        rows
    }
}

/// Shortest round-trip scientific notation (`1e-4`, `2.5e-5`, `NaN`).
pub fn sci(x: f64) -> String {
    format!("{x:e}")
}

pub fn contour_csv(rows: &[ContourRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record([
            sci(r.lr),
            r.batch_size.to_string(),
            sci(r.ratio),
            r.task.clone(),
            r.seed.to_string(),
            r.metric.clone(),
            sci(r.value),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn parse_contour(text: &str) -> Result<Vec<ContourRow>, SweepError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| SweepError::Csv(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(SweepError::Csv(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| SweepError::Csv(e.to_string()))?;
        let bad = |field: &str| SweepError::Csv(format!("row {}: invalid {field}", i + 1));
        let f = |idx: usize, name: &str| rec[idx].parse::<f64>().map_err(|_| bad(name));
        rows.push(ContourRow {
            lr: f(0, "lr")?,
            batch_size: rec[1].parse().map_err(|_| bad("batch_size"))?,
            ratio: f(2, "ratio")?,
            task: rec[3].to_string(),
            seed: rec[4].parse().map_err(|_| bad("seed"))?,
            metric: rec[5].to_string(),
            value: f(6, "value")?,
        });
    }
    Ok(rows)
}

/// Writes the contour CSV for `result` to `path`.
pub fn emit_contour(result: &SweepResult, path: &Path) -> Result<(), IoError> {
    crate::io::write_atomic(path, contour_csv(&result.rows()).as_bytes())
}

/// Read-only inputs shared by every cell of one task.
struct TaskInputs {
    kind: TaskKind,
    sft: Vec<SftExample>,
    eval: Vec<EvalItem>,
    train_pairs: Vec<PreferencePair>,
    eval_pairs: Vec<PreferencePair>,
    ref_cache: Option<RefLogpCache>,
}

fn prepare(grid: &SweepGrid, base: &ModelCheckpoint) -> Result<Vec<TaskInputs>, SweepError> {
    grid.tasks
        .iter()
        .map(|&kind| {
            let spec = TaskSpec {
                kind,
                train_size: grid.task.train_size,
                eval_size: grid.task.eval_size,
                min_len: grid.task.min_len,
                max_len: grid.task.max_len,
                seed: grid.task.seed,
            };
            let data = gen_task(&spec).map_err(|e| SweepError::Setup(e.to_string()))?;
            let train_pairs = task_preference_pairs(kind, &data.train, grid.task.seed);
            let eval_pairs = task_preference_pairs(kind, &data.eval, grid.task.seed ^ 1);
            let ref_cache = match grid.stage {
                Stage::Dpo => Some(
                    cache_ref_logprobs(base, &train_pairs, grid.train.length_normalize, grid.train.max_seq_len)
                        .map_err(|e| SweepError::Setup(e.to_string()))?,
                ),
                _ => None,
            };
            Ok(TaskInputs {
                kind,
                sft: data.train_examples(),
                eval: data.eval,
                train_pairs,
                eval_pairs,
                ref_cache,
            })
        })
        .collect()
}

fn run_cell(grid: &SweepGrid, base: &ModelCheckpoint, inputs: &TaskInputs, lr: f64, bs: usize, seed: u64) -> Cell {
    let start = Instant::now();
    let cfg = TrainConfig {
        peak_lr: lr,
        batch_size: bs,
        seed,
        ..grid.train.clone()
    };
    let outcome: Result<(f64, usize), String> = (|| match grid.stage {
        Stage::Sft => {
            let (m, recs) = train_sft(base, &inputs.sft, &cfg, |_| {}).map_err(|e| e.to_string())?;
            Ok((evaluate(&m, &inputs.eval).map_err(|e| e.to_string())?, recs.len()))
        }
        Stage::Dpo => {
            let cache = inputs.ref_cache.as_ref().expect("dpo inputs carry a cache");
            let (m, recs) = train_dpo_cached(base, &inputs.train_pairs, cache, &cfg, |_| {}).map_err(|e| e.to_string())?;
            Ok((evaluate(&m, &inputs.eval).map_err(|e| e.to_string())?, recs.len()))
        }
        Stage::Rm => {
            let (rm, recs) = train_rm(base, &inputs.train_pairs, &cfg, |_| {}).map_err(|e| e.to_string())?;
            let acc = rm_accuracy(&rm, &inputs.eval_pairs, None, cfg.max_seq_len).map_err(|e| e.to_string())?;
            Ok((acc.overall, recs.len()))
        }
    })();
    let (value, steps, error) = match outcome {
        Ok((v, s)) => (v, s, None),
        Err(e) => (f64::NAN, 0, Some(e)),
    };
    Cell {
        lr,
        batch_size: bs,
        ratio: lr_bs_ratio(lr, bs),
        task: inputs.kind,
        seed,
        metric: grid.stage.metric().into(),
        value,
        steps,
        wall_time_secs: start.elapsed().as_secs_f64(),
        error,
    }
}

/// Trains and evaluates every cell from `base` using up to `threads`
/// worker threads. Cell failures are recorded, not propagated; the result
/// is ordered by grid index regardless of completion order.
pub fn run_sweep(grid: &SweepGrid, base: &ModelCheckpoint, threads: usize) -> Result<SweepResult, SweepError> {
    grid.validate()?;
    let base = match grid.stage {
        Stage::Dpo => base.clone().with_role(Role::Policy),
        _ => base.clone(),
    };
    let inputs = prepare(grid, &base)?;
    let coords = grid.coordinates();
    let slots: Mutex<Vec<Option<Cell>>> = Mutex::new(vec![None; coords.len()]);
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, coords.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(task, lr, bs, seed)) = coords.get(i) else { break };
                let inp = inputs.iter().find(|t| t.kind == task).expect("inputs prepared per task");
                let cell = run_cell(grid, &base, inp, lr, bs, seed);
                slots.lock().expect("no worker panicked")[i] = Some(cell);
            });
        }
    });
    let cells = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect();
    Ok(SweepResult {
        grid: grid.clone(),
        base_fingerprint: format!("{:016x}", base.fingerprint()),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCell {
    pub lr: f64,
    pub batch_size: usize,
    pub ratio: f64,
    /// Mean metric over the cell's seeds.
    pub mean_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAnalysis {
    pub task: String,
    pub best: Option<BestCell>,
    /// Spearman rank correlation between log(ratio) and mean metric.
    pub correlation: f64,
    /// Set when every mean metric is equal and the correlation is reported
    /// as 0.
    pub degenerate: bool,
    pub n_cells: usize,
}

/// Average ranks (1-based); ties share the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman correlation, or `None` when either side has no variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// Per task: cells keyed by (lr bits, batch size) holding the ratio and
/// the finite seed values.
type TaskCells<'a> = BTreeMap<&'a str, BTreeMap<(u64, usize), (f64, Vec<f64>)>>;

/// Per task: the best (lr, bs) cell after averaging seeds (ties go to the
/// smaller lr, then the smaller batch size) and the rank correlation
/// between log(LR/BS) and the seed-averaged metric. NaN seeds are left out
/// of the averages.
pub fn ratio_analysis(rows: &[ContourRow]) -> Result<Vec<TaskAnalysis>, SweepError> {
    let mut by_task: TaskCells = BTreeMap::new();
    for r in rows {
        let cell = by_task
            .entry(r.task.as_str())
            .or_default()
            .entry((r.lr.to_bits(), r.batch_size))
            .or_insert_with(|| (r.ratio, Vec::new()));
        if r.value.is_finite() {
            cell.1.push(r.value);
        }
    }
    let mut out = Vec::new();
    for (task, cells) in by_task {
        let mut points: Vec<(f64, usize, f64, f64)> = cells
            .iter()
            .filter(|(_, (_, v))| !v.is_empty())
            .map(|(&(lr_bits, bs), (ratio, v))| (f64::from_bits(lr_bits), bs, *ratio, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut distinct: Vec<u64> = points.iter().map(|p| p.2.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(SweepError::TooFewRatios(task.into()));
        }
        let mut best: Option<BestCell> = None;
        for &(lr, bs, ratio, mean) in &points {
            if best.as_ref().is_none_or(|b| mean > b.mean_metric) {
                best = Some(BestCell {
                    lr,
                    batch_size: bs,
                    ratio,
                    mean_metric: mean,
                });
            }
        }
        let log_ratio: Vec<f64> = points.iter().map(|p| p.2.ln()).collect();
        let metric: Vec<f64> = points.iter().map(|p| p.3).collect();
        let corr = spearman(&log_ratio, &metric);
        out.push(TaskAnalysis {
            task: task.into(),
            best,
            correlation: corr.unwrap_or(0.0),
            degenerate: corr.is_none(),
            n_cells: points.len(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(lr: f64, bs: usize, seed: u64, value: f64) -> ContourRow {
        ContourRow {
            lr,
            batch_size: bs,
            ratio: lr / bs as f64,
            task: "copy".into(),
            seed,
            metric: "exact_match".into(),
            value,
        }
    }

    #[test]
    fn sci_notation() {
        assert_eq!(sci(1e-4), "1e-4");
        assert_eq!(sci(2.5e-5), "2.5e-5");
        assert_eq!(sci(0.3), "3e-1");
        assert_eq!(sci(f64::NAN), "NaN");
        assert_eq!("NaN".parse::<f64>().map(f64::is_nan), Ok(true));
    }

    #[test]
    fn csv_round_trip_with_nan() {
        let rows = vec![row(1e-4, 4, 0, 0.5), row(3e-4, 8, 1, f64::NAN), row(1e-3 + 1e-19, 16, 0, 1.0 / 3.0)];
        let text = contour_csv(&rows);
        assert!(text.starts_with("lr,batch_size,ratio,task,seed,metric,value\n"));
        let back = parse_contour(&text).unwrap();
        assert!(rows.iter().zip(&back).all(|(a, b)| a.same_as(b)));
        assert!(parse_contour("a,b\n1,2\n").is_err());
    }

    #[test]
    fn monotone_fixtures() {
        let mut up = Vec::new();
        let mut down = Vec::new();
        for lr in [1e-4, 1e-3, 1e-2] {
            for bs in [4, 16] {
                let r = row(lr, bs, 0, 0.0);
                up.push(ContourRow { value: r.ratio.ln(), ..r.clone() });
                down.push(ContourRow { value: -r.ratio.ln(), ..r });
            }
        }
        assert_eq!(ratio_analysis(&up).unwrap()[0].correlation, 1.0);
        assert_eq!(ratio_analysis(&down).unwrap()[0].correlation, -1.0);
    }

    #[test]
    fn tie_rule_and_seed_mean() {
        // (3e-4, 4) and (1e-4, 8) tie after seed averaging; the smaller lr wins.
        let rows = vec![
            row(1e-4, 4, 0, 0.2),
            row(1e-4, 4, 1, 0.4),
            row(1e-4, 8, 0, 0.9),
            row(1e-4, 8, 1, 0.7),
            row(3e-4, 4, 0, 0.8),
            row(3e-4, 4, 1, 0.8),
            row(3e-4, 8, 0, 0.1),
            row(3e-4, 8, 1, f64::NAN),
        ];
        let a = &ratio_analysis(&rows).unwrap()[0];
        let best = a.best.as_ref().unwrap();
        assert_eq!((best.lr, best.batch_size), (1e-4, 8));
        assert!((best.mean_metric - 0.8).abs() < 1e-12);
        assert_eq!(a.n_cells, 4);
    }

    #[test]
    fn degenerate_and_single_ratio() {
        let flat = vec![row(1e-4, 4, 0, 0.5), row(1e-3, 4, 0, 0.5)];
        let a = &ratio_analysis(&flat).unwrap()[0];
        assert!(a.degenerate);
        assert_eq!(a.correlation, 0.0);
        let single = vec![row(1e-4, 4, 0, 0.5), row(1e-4, 4, 1, 0.7)];
        assert!(matches!(ratio_analysis(&single), Err(SweepError::TooFewRatios(_))));
    }

    #[test]
    fn grid_validation_and_count() {
        let mut g = SweepGrid::default_for(Stage::Sft, vec![TaskKind::Copy, TaskKind::ModChain]);
        g.validate().unwrap();
        assert_eq!(g.n_cells(), 64);
        g.lr = vec![1e-3, 1e-4];
        assert!(g.validate().is_err());
        let parsed = SweepGrid::parse("stage = \"rm\"\nlr = [1e-3]\nbatch_size = [4]\ntasks = [\"copy\"]\n").unwrap();
        assert_eq!(parsed.seeds, vec![0, 1]);
        assert!(SweepGrid::parse("stage = \"rm\"\nlr = [1e-3]\nbatch_size = [4]\nbogus = 1\n").is_err());
    }
}
