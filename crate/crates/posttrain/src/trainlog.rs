//! Training logs: one JSON line per optimizer step plus a summary JSON.

use std::path::{Path, PathBuf};

use posttrain_core::train::StepRecord;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::io::{write_atomic, IoError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub wall_time_secs: f64,
    pub checkpoint: Option<PathBuf>,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub wall_time_secs: f64,
    pub checkpoint: Option<PathBuf>,
    pub config: RunConfig,
}

impl TrainLog {
    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            steps: self.records.len(),
            first_loss: self.records.first().map(|r| r.loss),
            final_loss: self.records.last().map(|r| r.loss),
            wall_time_secs: self.wall_time_secs,
            checkpoint: self.checkpoint.clone(),
            config: self.config.clone(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn parse_jsonl(text: &str) -> Result<Vec<StepRecord>, serde_json::Error> {
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
    }

    /// Writes `<dir>/train_log.jsonl` and `<dir>/summary.json`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), IoError> {
        let log = dir.join("train_log.jsonl");
        let summary = dir.join("summary.json");
        write_atomic(&log, self.to_jsonl().as_bytes())?;
        let json = serde_json::to_string_pretty(&self.summary()).expect("summary serializes");
        write_atomic(&summary, json.as_bytes())?;
        Ok((log, summary))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_summary() {
        let log = TrainLog {
            records: (1..=3)
                .map(|s| StepRecord {
                    step: s,
                    lr: 1e-3 / s as f64,
                    loss: 2.0 / s as f64,
                    grad_norm: 0.1,
                })
                .collect(),
            wall_time_secs: 1.5,
            checkpoint: None,
            config: RunConfig::default(),
        };
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(TrainLog::parse_jsonl(&text).unwrap(), log.records);
        let s = log.summary();
        assert_eq!(s.steps, 3);
        assert_eq!(s.first_loss, Some(2.0));
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = log.write(dir.path()).unwrap();
        assert!(a.exists() && b.exists());
    }
}
