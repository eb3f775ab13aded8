//! Benchmark-contamination analysis with an n-gram index, and
//! language-distribution estimation with a pluggable detector.

pub mod lang;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;
use xxhash_rust::xxh3::xxh3_64;

use crate::io::{read_text, IoError};

pub use lang::{language_distribution, Detector, HeuristicDetector, LanguageShare};

/// Identifier of the normalization applied before gram extraction.
pub const NORMALIZATION_ID: &str = "lower+nfc+alnum-split";
pub const DEFAULT_N: usize = 8;
/// Contamination rule: an item counts if any of its grams is indexed.
pub const HIT_RULE: &str = "any-hit";

#[derive(Debug, Error)]
pub enum AuditError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}:{line}: {message}")]
    Record { path: PathBuf, line: usize, message: String },
    #[error("benchmark {0:?} has no items")]
    EmptyBenchmark(String),
    #[error("n must be at least 1")]
    ZeroN,
}

/// Lowercases, applies NFC, turns every character that is neither
/// alphanumeric nor a combining mark into a space, and splits on
/// whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .nfc()
        .map(|c| if c.is_alphanumeric() || is_combining_mark(c) { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// All `n`-grams of `tokens` joined by single spaces. A non-empty stream
/// shorter than `n` yields itself as one gram.
pub fn grams(tokens: &[String], n: usize) -> Vec<String> {
    if tokens.is_empty() {
        Vec::new()
    } else if tokens.len() < n {
        vec![tokens.join(" ")]
    } else {
        tokens.windows(n).map(|w| w.join(" ")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexMode {
    /// 64-bit xxh3 gram hashes.
    Hashed,
    /// Gram strings; no collisions.
    Exact,
}

#[derive(Debug, Clone)]
pub struct NgramIndex {
    pub n: usize,
    pub normalization: &'static str,
    pub docs: usize,
    mode: IndexMode,
    hashes: HashSet<u64>,
    exact: HashSet<String>,
}

impl NgramIndex {
    pub fn new(n: usize, mode: IndexMode) -> Result<Self, AuditError> {
        if n == 0 {
            return Err(AuditError::ZeroN);
        }
        Ok(Self {
            n,
            normalization: NORMALIZATION_ID,
            docs: 0,
            mode,
            hashes: HashSet::new(),
            exact: HashSet::new(),
        })
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    /// Number of distinct grams stored.
    pub fn len(&self) -> usize {
        match self.mode {
            IndexMode::Hashed => self.hashes.len(),
            IndexMode::Exact => self.exact.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert_doc(&mut self, text: &str) {
        self.docs += 1;
        for g in grams(&normalize(text), self.n) {
            match self.mode {
                IndexMode::Hashed => {
                    self.hashes.insert(xxh3_64(g.as_bytes()));
                }
                IndexMode::Exact => {
                    self.exact.insert(g);
                }
            }
        }
    }

    pub fn contains_gram(&self, gram: &str) -> bool {
        match self.mode {
            IndexMode::Hashed => self.hashes.contains(&xxh3_64(gram.as_bytes())),
            IndexMode::Exact => self.exact.contains(gram),
        }
    }

    /// Whether any gram of `text` is indexed.
    pub fn hits(&self, text: &str) -> bool {
        grams(&normalize(text), self.n).iter().any(|g| self.contains_gram(g))
    }

    /// Adds every document of every corpus file.
    pub fn build(paths: &[PathBuf], n: usize, mode: IndexMode, fields: &FieldMap) -> Result<Self, AuditError> {
        let mut index = Self::new(n, mode)?;
        for p in paths {
            for doc in load_corpus(p, fields)? {
                index.insert_doc(&doc.text);
            }
        }
        Ok(index)
    }
}

/// Which JSON fields make up a record's text (concatenated with newlines)
/// and which field holds its id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMap {
    pub id: String,
    pub text: Vec<String>,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            text: vec!["text".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Doc {
    pub id: String,
    pub text: String,
}

fn record_text(v: &Value, fields: &FieldMap) -> Option<String> {
    if let Some(msgs) = v.get("messages").and_then(Value::as_array) {
        let parts: Option<Vec<&str>> = msgs.iter().map(|m| m.get("content").and_then(Value::as_str)).collect();
        return parts.map(|p| p.join("\n"));
    }
    let parts: Vec<&str> = fields.text.iter().filter_map(|f| v.get(f).and_then(Value::as_str)).collect();
    if !parts.is_empty() {
        return Some(parts.join("\n"));
    }
    match (v.get("prompt").and_then(Value::as_str), v.get("completion").and_then(Value::as_str)) {
        (Some(p), Some(c)) => Some(format!("{p}\n{c}")),
        _ => None,
    }
}

/// Reads a JSON-lines corpus. Conversation records (`messages`) use the
/// concatenated message contents; other records use `fields.text`, falling
/// back to raw SFT `prompt` + `completion`.
pub fn load_corpus(path: &Path, fields: &FieldMap) -> Result<Vec<Doc>, AuditError> {
    let text = read_text(path)?;
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| AuditError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let v: Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let body = record_text(&v, fields).ok_or_else(|| err(format!("no text field among {:?}", fields.text)))?;
        let id = match v.get(&fields.id) {
            Some(Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
            None => format!("line-{}", i + 1),
        };
        docs.push(Doc { id, text: body });
    }
    Ok(docs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationRow {
    pub benchmark: String,
    pub contaminated: usize,
    pub total: usize,
    /// `100 · contaminated / total`, rendered with two decimals.
    pub percent: String,
}

impl ContaminationRow {
    pub fn fraction(&self) -> f64 {
        self.contaminated as f64 / self.total as f64
    }
}

pub fn render_percent(count: usize, total: usize) -> String {
    format!("{:.2}", 100.0 * count as f64 / total as f64)
}

/// Contamination of one benchmark against `index`.
pub fn contamination(index: &NgramIndex, benchmark: &str, items: &[Doc]) -> Result<ContaminationRow, AuditError> {
    if items.is_empty() {
        return Err(AuditError::EmptyBenchmark(benchmark.into()));
    }
    let contaminated = items.iter().filter(|d| index.hits(&d.text)).count();
    Ok(ContaminationRow {
        benchmark: benchmark.into(),
        contaminated,
        total: items.len(),
        percent: render_percent(contaminated, items.len()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub train_corpus: Vec<String>,
    pub n: usize,
    pub rule: String,
    pub normalization: String,
    pub mode: IndexMode,
    pub indexed_docs: usize,
    pub indexed_grams: usize,
    pub rows: Vec<ContaminationRow>,
}

/// Benchmark display name: the file stem.
pub fn benchmark_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// One row per benchmark file, in the order given.
pub fn audit_report(
    train: &[PathBuf],
    benchmarks: &[PathBuf],
    n: usize,
    mode: IndexMode,
    train_fields: &FieldMap,
    bench_fields: &FieldMap,
) -> Result<ContaminationReport, AuditError> {
    let index = NgramIndex::build(train, n, mode, train_fields)?;
    let rows = benchmarks
        .iter()
        .map(|b| contamination(&index, &benchmark_name(b), &load_corpus(b, bench_fields)?))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ContaminationReport {
        train_corpus: train.iter().map(|p| p.display().to_string()).collect(),
        n,
        rule: HIT_RULE.into(),
        normalization: NORMALIZATION_ID.into(),
        mode,
        indexed_docs: index.docs,
        indexed_grams: index.len(),
        rows,
    })
}

impl ContaminationReport {
    /// Two-column table (`Benchmark`, `Contamination`) preceded by `#` notes
    /// recording the method and, in hashed mode, the collision bound.
    pub fn render_text(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.benchmark.chars().count()).chain([9]).max().unwrap_or(9);
        let pct_w = self.rows.iter().map(|r| r.percent.len() + 1).chain([13]).max().unwrap_or(13);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# n={} rule={} normalization={} mode={:?} train_docs={}",
            self.n, self.rule, self.normalization, self.mode, self.indexed_docs
        );
        if self.mode == IndexMode::Hashed {
            let _ = writeln!(
                out,
                "# grams stored as 64-bit hashes; false-hit probability per query gram <= {}/2^64",
                self.indexed_grams
            );
        }
        let _ = writeln!(out, "{:<name_w$}  {:>pct_w$}", "Benchmark", "Contamination");
        let _ = writeln!(out, "{}  {}", "-".repeat(name_w), "-".repeat(pct_w));
        for r in &self.rows {
            let _ = writeln!(out, "{:<name_w$}  {:>pct_w$}", r.benchmark, format!("{}%", r.percent));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
