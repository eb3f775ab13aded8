//! JSON-lines loaders for SFT conversations and preference pairs. Malformed
//! lines are collected as diagnostics instead of aborting the load.
//!
//! SFT line, chat form (rendered through the chat template):
//! `{"messages":[{"role":"user","content":"hi"},{"role":"assistant","content":"hello"}]}`
//!
//! SFT line, raw form (prompt bytes as-is, loss on `completion` + EOS):
//! `{"prompt":"3+4 mod 10 = ","completion":"7"}`
//!
//! Pair line: `{"prompt":"...","chosen":"...","rejected":"..."}` with
//! optional `"id"` and `"category"` strings. The prompt goes through the
//! chat template unless `"raw": true`.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use posttrain_core::data::{render_sft, ChatRole, Message, PreferencePair, SftExample};
use posttrain_core::tokenizer::{decode_ids, tokenize, EOS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{read_text, IoError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: no valid records ({n_bad} malformed){}", first.as_ref().map(|d| format!("; first: {d}")).unwrap_or_default())]
    Empty {
        path: PathBuf,
        n_bad: usize,
        first: Option<Diagnostic>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<T> {
    pub items: Vec<T>,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub pair: PreferencePair,
    pub category: Option<String>,
}

#[derive(Deserialize)]
struct RawMessage {
    role: String,
    content: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SftRecord {
    Chat { messages: Vec<RawMessage> },
    Raw { prompt: String, completion: String },
}

#[derive(Deserialize)]
struct RawPair {
    prompt: String,
    chosen: String,
    rejected: String,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    category: Option<String>,
    #[serde(default)]
    raw: bool,
}

fn parse_lines<T>(
    text: &str,
    mut parse: impl FnMut(usize, &str) -> Result<T, String>,
) -> Loaded<T> {
    let mut items = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse(i + 1, line) {
            Ok(item) => items.push(item),
            Err(message) => diagnostics.push(Diagnostic { line: i + 1, message }),
        }
    }
    Loaded { items, diagnostics }
}

fn non_empty<T>(path: &Path, loaded: Loaded<T>) -> Result<Loaded<T>, LoadError> {
    if loaded.items.is_empty() {
        return Err(LoadError::Empty {
            path: path.to_path_buf(),
            n_bad: loaded.diagnostics.len(),
            first: loaded.diagnostics.into_iter().next(),
        });
    }
    Ok(loaded)
}

fn parse_conversation(line: &str) -> Result<SftExample, String> {
    let record: SftRecord = serde_json::from_str(line)
        .map_err(|e| format!("invalid record (expected \"messages\" or \"prompt\"+\"completion\"): {e}"))?;
    let messages = match record {
        SftRecord::Chat { messages } => messages,
        SftRecord::Raw { prompt, completion } => {
            if completion.is_empty() {
                return Err("completion is empty".into());
            }
            let mut completion = tokenize(completion.as_bytes());
            completion.ids.push(EOS);
            return Ok(SftExample {
                prompt: tokenize(prompt.as_bytes()),
                completion,
            });
        }
    };
    let messages = messages
        .into_iter()
        .map(|m| {
            Ok(Message {
                role: ChatRole::parse(&m.role).map_err(|e| e.to_string())?,
                content: m.content,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    render_sft(&messages).map_err(|e| e.to_string())
}

/// Parses SFT conversations from JSON-lines text.
pub fn parse_sft(text: &str) -> Loaded<SftExample> {
    parse_lines(text, |_, line| parse_conversation(line))
}

/// Parses preference pairs from JSON-lines text. Pairs without an `id`
/// are named `line-<n>`; duplicate ids are rejected.
pub fn parse_pairs(text: &str) -> Loaded<PairRecord> {
    let mut seen = HashSet::new();
    parse_lines(text, |line_no, line| {
        let raw: RawPair = serde_json::from_str(line).map_err(|e| format!("invalid record: {e}"))?;
        let id = raw.id.unwrap_or_else(|| format!("line-{line_no}"));
        if id.is_empty() || id.contains('\n') {
            return Err("pair id must be non-empty and single-line".into());
        }
        if !seen.insert(id.clone()) {
            return Err(format!("duplicate pair id {id:?}"));
        }
        let pair = if raw.raw {
            PreferencePair::from_prompt_tokens(id, tokenize(raw.prompt.as_bytes()), &raw.chosen, &raw.rejected)
        } else {
            PreferencePair::from_text(id, &raw.prompt, &raw.chosen, &raw.rejected)
        }
        .map_err(|e| e.to_string())?;
        Ok(PairRecord {
            pair,
            category: raw.category,
        })
    })
}

/// Raw-form SFT line for `prompt` / `completion`.
pub fn raw_sft_line(prompt: &str, completion: &str) -> String {
    serde_json::json!({ "prompt": prompt, "completion": completion }).to_string()
}

fn response_text(seq: &[u32]) -> String {
    let ids = seq.strip_suffix(&[EOS]).unwrap_or(seq);
    String::from_utf8_lossy(&decode_ids(ids)).into_owned()
}

/// Raw-form pair line for a pair whose prompt was tokenized without the
/// chat template.
pub fn raw_pair_line(pair: &PreferencePair) -> String {
    serde_json::json!({
        "id": pair.pair_id,
        "prompt": String::from_utf8_lossy(&decode_ids(&pair.prompt.ids)),
        "chosen": response_text(&pair.chosen.ids),
        "rejected": response_text(&pair.rejected.ids),
        "raw": true,
    })
    .to_string()
}

pub fn load_sft(path: &Path) -> Result<Loaded<SftExample>, LoadError> {
    non_empty(path, parse_sft(&read_text(path)?))
}

pub fn load_pairs(path: &Path) -> Result<Loaded<PairRecord>, LoadError> {
    non_empty(path, parse_pairs(&read_text(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_template() {
        let l = parse_sft(r#"{"messages":[{"role":"user","content":"hi"},{"role":"assistant","content":"hello"}]}"#);
        assert!(l.diagnostics.is_empty());
        let ex = &l.items[0];
        assert_eq!(decode_ids(&ex.prompt.ids), b"<|user|>\nhi\n<|assistant|>\n");
        assert_eq!(ex.completion.ids.last(), Some(&EOS));
        assert_eq!(decode_ids(&ex.completion.ids), b"hello");
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let text = [
            r#"{"messages":[{"role":"user","content":"a"},{"role":"assistant","content":"b"}]}"#,
            r#"{"messages":[{"role":"user","content":"a"}]}"#,
            "",
            "not json",
            r#"{"messages":[{"role":"robot","content":"a"},{"role":"assistant","content":"b"}]}"#,
        ]
        .join("\n");
        let l = parse_sft(&text);
        assert_eq!(l.items.len(), 1);
        let lines: Vec<usize> = l.diagnostics.iter().map(|d| d.line).collect();
        assert_eq!(lines, [2, 4, 5]);
        assert!(l.diagnostics[0].message.contains("no completion"));
    }

    #[test]
    fn pairs_ids_and_identical_responses() {
        let text = [
            r#"{"prompt":"q","chosen":"a","rejected":"b","category":"chat"}"#,
            r#"{"prompt":"q","chosen":"a","rejected":"a"}"#,
            r#"{"id":"x","prompt":"q","chosen":"a","rejected":"b"}"#,
            r#"{"id":"x","prompt":"q","chosen":"c","rejected":"b"}"#,
        ]
        .join("\n");
        let l = parse_pairs(&text);
        assert_eq!(l.items.len(), 2);
        assert_eq!(l.items[0].pair.pair_id, "line-1");
        assert_eq!(l.items[0].category.as_deref(), Some("chat"));
        assert_eq!(l.items[1].pair.pair_id, "x");
        assert_eq!(l.diagnostics.iter().map(|d| d.line).collect::<Vec<_>>(), [2, 4]);
        assert!(l.diagnostics[0].message.contains("identical"));
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "nope\n").unwrap();
        assert!(matches!(load_sft(&p), Err(LoadError::Empty { n_bad: 1, .. })));
    }

    #[test]
    fn raw_forms_round_trip_task_data() {
        use posttrain_core::tasks::{gen_task, task_preference_pairs, TaskKind, TaskSpec};
        let data = gen_task(&TaskSpec::new(TaskKind::ModChain, 20, 5, 3)).unwrap();
        let sft_text: String = data.train.iter().map(|it| raw_sft_line(&it.prompt, &it.gold) + "\n").collect();
        let loaded = parse_sft(&sft_text);
        assert!(loaded.diagnostics.is_empty());
        let ids = |v: &[SftExample]| v.iter().map(|e| (e.prompt.ids.clone(), e.completion.ids.clone())).collect::<Vec<_>>();
        assert_eq!(ids(&loaded.items), ids(&data.train_examples()));

        let pairs = task_preference_pairs(TaskKind::ModChain, &data.train, 9);
        let pair_text: String = pairs.iter().map(|p| raw_pair_line(p) + "\n").collect();
        let back: Vec<PreferencePair> = parse_pairs(&pair_text).items.into_iter().map(|r| r.pair).collect();
        assert_eq!(back.len(), pairs.len());
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!((&a.pair_id, &a.prompt.ids, &a.chosen.ids, &a.rejected.ids), (&b.pair_id, &b.prompt.ids, &b.chosen.ids, &b.rejected.ids));
        }
        assert!(!parse_sft(r#"{"prompt":"p","completion":""}"#).diagnostics.is_empty());
    }
}
