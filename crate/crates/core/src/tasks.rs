//! Synthetic evaluation tasks: `modchain` (multi-step modular arithmetic,
//! the reasoning-like family) and `copy` (echo a lowercase payload, the
//! pattern-like family), plus greedy exact-match evaluation.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PreferencePair, SftExample};
use crate::model::{ModelCheckpoint, ModelError};
use crate::tokenizer::{decode_lossy, tokenize, EOS};

/// Modulus of every modchain instance; answers are single digits.
pub const MODCHAIN_MODULUS: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error("unknown task kind {0:?} (expected modchain or copy)")]
    UnknownKind(String),
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("task space holds {space} distinct instances but {needed} were requested")]
    Infeasible { space: u128, needed: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    ModChain,
    Copy,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::ModChain => "modchain",
            TaskKind::Copy => "copy",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, TaskError> {
        match s {
            "modchain" => Ok(TaskKind::ModChain),
            "copy" => Ok(TaskKind::Copy),
            other => Err(TaskError::UnknownKind(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub train_size: usize,
    pub eval_size: usize,
    /// Inclusive range of operand count (modchain) or payload length (copy).
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// Default difficulty: 2–4 operands or 2–4 payload letters.
    pub fn new(kind: TaskKind, train_size: usize, eval_size: usize, seed: u64) -> Self {
        Self {
            kind,
            train_size,
            eval_size,
            min_len: 2,
            max_len: 4,
            seed,
        }
    }

    /// Number of distinct instances the difficulty range admits.
    pub fn space_size(&self) -> u128 {
        let base: u128 = match self.kind {
            TaskKind::ModChain => MODCHAIN_MODULUS as u128,
            TaskKind::Copy => 26,
        };
        (self.min_len..=self.max_len)
            .map(|l| base.saturating_pow(l as u32))
            .fold(0u128, u128::saturating_add)
    }
}

/// One evaluation instance: a raw prompt and its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub prompt: String,
    pub gold: String,
}

impl EvalItem {
    /// Training example: the raw prompt, completion `gold + EOS`.
    pub fn to_sft(&self) -> SftExample {
        let mut completion = tokenize(self.gold.as_bytes());
        completion.ids.push(EOS);
        SftExample {
            prompt: tokenize(self.prompt.as_bytes()),
            completion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<EvalItem>,
    pub eval: Vec<EvalItem>,
}

impl TaskData {
    pub fn train_examples(&self) -> Vec<SftExample> {
        self.train.iter().map(EvalItem::to_sft).collect()
    }
}

fn instance(kind: TaskKind, symbols: &[u32]) -> EvalItem {
    match kind {
        TaskKind::ModChain => {
            let terms: Vec<String> = symbols.iter().map(|d| format!("{d}")).collect();
            let sum: u32 = symbols.iter().sum::<u32>() % MODCHAIN_MODULUS;
            EvalItem {
                prompt: format!("{} mod {MODCHAIN_MODULUS} = ", terms.join("+")),
                gold: format!("{sum}"),
            }
        }
        TaskKind::Copy => {
            let payload: String = symbols.iter().map(|&s| char::from(b'a' + s as u8)).collect();
            EvalItem {
                prompt: format!("seq {payload} ; "),
                gold: payload,
            }
        }
    }
}

fn alphabet(kind: TaskKind) -> u32 {
    match kind {
        TaskKind::ModChain => MODCHAIN_MODULUS,
        TaskKind::Copy => 26,
    }
}

/// Decodes instance number `code` (in `0..space_size`) to its symbols.
fn nth_instance(spec: &TaskSpec, mut code: u128) -> Vec<u32> {
    let base = alphabet(spec.kind) as u128;
    for len in spec.min_len..=spec.max_len {
        let count = base.pow(len as u32);
        if code < count {
            return (0..len)
                .map(|_| {
                    let s = (code % base) as u32;
                    code /= base;
                    s
                })
                .collect();
        }
        code -= count;
    }
    unreachable!("code below space size")
}

/// Deterministically draws `train_size + eval_size` distinct instances; the
/// first `train_size` form the training split. Splits never share a prompt.
pub fn gen_task(spec: &TaskSpec) -> Result<TaskData, TaskError> {
    if spec.train_size == 0 || spec.eval_size == 0 {
        return Err(TaskError::Spec("train and eval sizes must be >= 1".into()));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(TaskError::Spec(format!("length range {}..={} is empty", spec.min_len, spec.max_len)));
    }
    if spec.max_len > 24 {
        return Err(TaskError::Spec("length range is limited to 24 symbols".into()));
    }
    let needed = spec.train_size + spec.eval_size;
    let space = spec.space_size();
    if (needed as u128) > space {
        return Err(TaskError::Infeasible { space, needed });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let codes: Vec<u128> = if space <= 4 * needed as u128 {
        let mut all: Vec<u128> = (0..space).collect();
        all.shuffle(&mut rng);
        all.truncate(needed);
        all
    } else {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(needed);
        while out.len() < needed {
            let code = rng.gen_range(0..space);
            if seen.insert(code) {
                out.push(code);
            }
        }
        out
    };
    let mut items: Vec<EvalItem> = codes.into_iter().map(|c| instance(spec.kind, &nth_instance(spec, c))).collect();
    let eval = items.split_off(spec.train_size);
    Ok(TaskData {
        spec: spec.clone(),
        train: items,
        eval,
    })
}

/// Fraction of items where `predict` returns exactly the gold string.
pub fn accuracy(items: &[EvalItem], mut predict: impl FnMut(&EvalItem) -> String) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let hits = items.iter().filter(|it| predict(it) == it.gold).count();
    hits as f64 / items.len() as f64
}

/// Greedy completion of a raw prompt, cut at the first EOS. Generation
/// stops one token past the longest acceptable answer.
pub fn greedy_answer(model: &ModelCheckpoint, prompt: &str, max_new_tokens: usize) -> Result<String, ModelError> {
    let out = model.generate(&tokenize(prompt.as_bytes()).ids, max_new_tokens)?;
    let end = out.ids.iter().position(|&t| t == EOS).unwrap_or(out.ids.len());
    Ok(decode_lossy(&out.ids[..end]))
}

/// Greedy exact-match accuracy of `model` on `items`.
pub fn evaluate(model: &ModelCheckpoint, items: &[EvalItem]) -> Result<f64, ModelError> {
    let mut err = None;
    let acc = accuracy(items, |it| match greedy_answer(model, &it.prompt, it.gold.len() + 1) {
        Ok(s) => s,
        Err(e) => {
            err.get_or_insert(e);
            String::new()
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(acc),
    }
}

/// A wrong answer of the same shape as `item.gold`.
fn wrong_answer(kind: TaskKind, gold: &str, rng: &mut ChaCha8Rng) -> String {
    match kind {
        TaskKind::ModChain => {
            let g: u32 = gold.parse().unwrap_or(0);
            format!("{}", (g + rng.gen_range(1..MODCHAIN_MODULUS)) % MODCHAIN_MODULUS)
        }
        TaskKind::Copy => {
            let mut bytes = gold.as_bytes().to_vec();
            let i = rng.gen_range(0..bytes.len());
            bytes[i] = b'a' + (bytes[i] - b'a' + rng.gen_range(1..26)) % 26;
            String::from_utf8(bytes).expect("lowercase ascii")
        }
    }
}

/// Preference pairs over task items: chosen is the gold answer, rejected a
/// same-shaped wrong answer.
pub fn task_preference_pairs(kind: TaskKind, items: &[EvalItem], seed: u64) -> Vec<PreferencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let wrong = wrong_answer(kind, &it.gold, &mut rng);
            PreferencePair::from_prompt_tokens(format!("{kind}-{i}"), tokenize(it.prompt.as_bytes()), &it.gold, &wrong)
                .expect("gold and wrong answers differ and are non-empty")
        })
        .collect()
}

/// Separable arithmetic preference set: modchain prompts whose chosen
/// response is the correct digit and whose rejected response is the digit
/// corrupted into a letter (`d ↦ 'a' + d`). A single feature of the
/// response token separates every pair.
pub fn separable_pairs(n: usize, seed: u64) -> Result<Vec<PreferencePair>, TaskError> {
    let spec = TaskSpec {
        kind: TaskKind::ModChain,
        train_size: n,
        eval_size: 1,
        min_len: 2,
        max_len: 5,
        seed,
    };
    let data = gen_task(&spec)?;
    Ok(data
        .train
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let d = it.gold.as_bytes()[0] - b'0';
            let corrupted = String::from(char::from(b'a' + d));
            PreferencePair::from_prompt_tokens(format!("sep-{i}"), tokenize(it.prompt.as_bytes()), &it.gold, &corrupted)
                .expect("digit and letter differ")
        })
        .collect())
}
