//! Run manifests: everything needed to rerun a command and check that it
//! reproduces its artifacts byte for byte.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::io::{file_sha256, read_text, write_atomic, IoError};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Version string recorded in every manifest.
pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, IoError> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: file_sha256(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
    /// Whether the bytes depend only on the invocation (no timings).
    pub deterministic: bool,
}

/// `invocation` is the fully resolved command (config files already
/// merged with flag overrides), so replaying it needs nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest<I> {
    pub subcommand: String,
    pub invocation: I,
    pub inputs: Vec<FileDigest>,
    pub code_version: String,
    pub seed: Option<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<Artifact>,
}

impl<I: Serialize> RunManifest<I> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, run_dir: &Path) -> Result<PathBuf, IoError> {
        let path = run_dir.join(MANIFEST_FILE);
        write_atomic(&path, self.to_json().as_bytes())?;
        Ok(path)
    }
}

impl<I: for<'de> Deserialize<'de>> RunManifest<I> {
    pub fn load(path: &Path) -> Result<Result<Self, serde_json::Error>, IoError> {
        Ok(serde_json::from_str(&read_text(path)?))
    }
}

/// Inputs whose current digest differs from the recorded one.
pub fn changed_inputs(inputs: &[FileDigest]) -> Result<Vec<PathBuf>, IoError> {
    let mut changed = Vec::new();
    for d in inputs {
        if file_sha256(&d.path)? != d.sha256 {
            changed.push(d.path.clone());
        }
    }
    Ok(changed)
}

/// Deterministic artifacts of `original` whose bytes differ in `replayed`
/// (missing artifacts count as different).
pub fn artifact_mismatches(original: &[Artifact], replayed: &[Artifact]) -> Vec<PathBuf> {
    original
        .iter()
        .filter(|a| a.deterministic)
        .filter(|a| !replayed.iter().any(|b| b.path == a.path && b.sha256 == a.sha256))
        .map(|a| a.path.clone())
        .collect()
}
