//! In-memory dataset types, chat-template rendering, context fitting and
//! deterministic batch planning. File parsing lives in the std crate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{encode_bytes, tokenize, TokenSeq, EOS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataError {
    #[error("conversation is empty")]
    EmptyConversation,
    #[error("no completion: final message has role {0}, expected assistant")]
    NoCompletion(String),
    #[error("unknown role {0:?}")]
    UnknownRole(String),
    #[error("chosen and rejected responses are identical")]
    IdenticalResponses,
    #[error("empty {0} response")]
    EmptyResponse(&'static str),
    #[error("completion of {completion} tokens cannot fit a context of {max}")]
    CompletionTooLong { completion: usize, max: usize },
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("batch size {batch_size} exceeds {n} examples with drop_last; no batches")]
    EmptyPlan { batch_size: usize, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

impl ChatRole {
    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "system" => Ok(ChatRole::System),
            "user" => Ok(ChatRole::User),
            "assistant" => Ok(ChatRole::Assistant),
            other => Err(DataError::UnknownRole(other.into())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChatRole::System => "system",
            ChatRole::User => "user",
            ChatRole::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: ChatRole,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    /// Rendered conversation up to and including the final assistant header.
    pub prompt: TokenSeq,
    /// Final assistant turn followed by EOS.
    pub completion: TokenSeq,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: String,
    pub prompt: TokenSeq,
    /// Chosen response followed by EOS.
    pub chosen: TokenSeq,
    /// Rejected response followed by EOS.
    pub rejected: TokenSeq,
}

fn header(role: ChatRole) -> String {
    format!("<|{}|>\n", role.as_str())
}

/// Renders a conversation with the fixed template
/// `<|role|>\n{content}\n` for system and user turns and
/// `<|assistant|>\n{content}<EOS>` for assistant turns. The last turn must
/// be the assistant's and becomes the completion.
pub fn render_sft(messages: &[Message]) -> Result<SftExample, DataError> {
    let (last, history) = messages.split_last().ok_or(DataError::EmptyConversation)?;
    if last.role != ChatRole::Assistant {
        return Err(DataError::NoCompletion(last.role.as_str().into()));
    }
    let mut text = String::new();
    let mut ids = Vec::new();
    for m in history {
        let h = header(m.role);
        text.push_str(&h);
        text.push_str(&m.content);
        ids.extend(encode_bytes(h.as_bytes()));
        ids.extend(encode_bytes(m.content.as_bytes()));
        if m.role == ChatRole::Assistant {
            ids.push(EOS);
        } else {
            text.push('\n');
            ids.extend(encode_bytes(b"\n"));
        }
    }
    let h = header(ChatRole::Assistant);
    text.push_str(&h);
    ids.extend(encode_bytes(h.as_bytes()));
    Ok(SftExample {
        prompt: TokenSeq {
            ids,
            text: Some(text.into_bytes()),
        },
        completion: with_eos(&last.content),
    })
}

/// Prompt for a single user request, rendered with the chat template.
pub fn render_user_prompt(prompt: &str) -> TokenSeq {
    let text = format!("{}{}\n{}", header(ChatRole::User), prompt, header(ChatRole::Assistant));
    tokenize(text.as_bytes())
}

fn with_eos(text: &str) -> TokenSeq {
    let mut seq = tokenize(text.as_bytes());
    seq.ids.push(EOS);
    seq
}

impl PreferencePair {
    /// Tokenizes a pair; the prompt goes through the chat template and both
    /// responses get a trailing EOS.
    pub fn from_text(pair_id: impl Into<String>, prompt: &str, chosen: &str, rejected: &str) -> Result<Self, DataError> {
        Self::from_prompt_tokens(pair_id, render_user_prompt(prompt), chosen, rejected)
    }

    /// Like [`PreferencePair::from_text`] with an already-tokenized prompt.
    pub fn from_prompt_tokens(pair_id: impl Into<String>, prompt: TokenSeq, chosen: &str, rejected: &str) -> Result<Self, DataError> {
        if chosen.is_empty() {
            return Err(DataError::EmptyResponse("chosen"));
        }
        if rejected.is_empty() {
            return Err(DataError::EmptyResponse("rejected"));
        }
        if chosen == rejected {
            return Err(DataError::IdenticalResponses);
        }
        Ok(Self {
            pair_id: pair_id.into(),
            prompt,
            chosen: with_eos(chosen),
            rejected: with_eos(rejected),
        })
    }
}

/// Left-truncates `prompt` so that `BOS + prompt + completion` fits in
/// `max_len` tokens. The completion is never cut.
pub fn fit_to_context<'a>(prompt: &'a [u32], completion: &[u32], max_len: usize) -> Result<&'a [u32], DataError> {
    let budget = max_len
        .checked_sub(1 + completion.len())
        .ok_or(DataError::CompletionTooLong {
            completion: completion.len(),
            max: max_len,
        })?;
    Ok(&prompt[prompt.len().saturating_sub(budget)..])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub seed: u64,
    /// Examples per optimizer step.
    pub batch_size: usize,
    pub drop_last: bool,
}

/// Seeded permutation of `0..n`.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Splits a seeded permutation of `0..n` into consecutive batches.
pub fn make_batches(n: usize, plan: &BatchPlan) -> Result<Vec<Vec<usize>>, DataError> {
    if plan.batch_size == 0 {
        return Err(DataError::ZeroBatch);
    }
    if plan.drop_last && plan.batch_size > n {
        return Err(DataError::EmptyPlan {
            batch_size: plan.batch_size,
            n,
        });
    }
    let order = shuffled_order(n, plan.seed);
    Ok(order
        .chunks(plan.batch_size)
        .filter(|c| !plan.drop_last || c.len() == plan.batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::decode_ids;

    fn msg(role: ChatRole, content: &str) -> Message {
        Message {
            role,
            content: content.into(),
        }
    }

    #[test]
    fn renders_single_turn() {
        let ex = render_sft(&[msg(ChatRole::User, "hi"), msg(ChatRole::Assistant, "hello")]).unwrap();
        assert_eq!(decode_ids(&ex.prompt.ids), b"<|user|>\nhi\n<|assistant|>\n".to_vec());
        assert_eq!(ex.prompt.text.as_deref(), Some(&b"<|user|>\nhi\n<|assistant|>\n"[..]));
        assert_eq!(*ex.completion.ids.last().unwrap(), EOS);
        assert_eq!(decode_ids(&ex.completion.ids), b"hello".to_vec());
    }

    #[test]
    fn renders_multi_turn_with_eos_after_assistant() {
        let ex = render_sft(&[
            msg(ChatRole::System, "be brief"),
            msg(ChatRole::User, "a"),
            msg(ChatRole::Assistant, "b"),
            msg(ChatRole::User, "c"),
            msg(ChatRole::Assistant, "d"),
        ])
        .unwrap();
        assert_eq!(ex.prompt.ids.iter().filter(|&&t| t == EOS).count(), 1);
        assert!(decode_ids(&ex.prompt.ids).starts_with(b"<|system|>\nbe brief\n<|user|>\na\n<|assistant|>\nb<|user|>"));
    }

    #[test]
    fn final_user_turn_has_no_completion() {
        let err = render_sft(&[msg(ChatRole::User, "hi")]).unwrap_err();
        assert_eq!(err, DataError::NoCompletion("user".into()));
        assert_eq!(render_sft(&[]).unwrap_err(), DataError::EmptyConversation);
    }

    #[test]
    fn identical_pair_rejected() {
        assert_eq!(
            PreferencePair::from_text("p", "q", "same", "same").unwrap_err(),
            DataError::IdenticalResponses
        );
        assert!(PreferencePair::from_text("p", "q", "", "x").is_err());
    }

    #[test]
    fn left_truncation_keeps_completion() {
        let prompt = [10, 11, 12, 13, 14];
        let completion = [20, 21];
        assert_eq!(fit_to_context(&prompt, &completion, 6).unwrap(), &[12, 13, 14]);
        assert_eq!(fit_to_context(&prompt, &completion, 100).unwrap(), &prompt);
        assert!(fit_to_context(&prompt, &completion, 2).is_err());
    }

    #[test]
    fn one_full_batch() {
        let b = make_batches(10, &BatchPlan { seed: 3, batch_size: 10, drop_last: false }).unwrap();
        assert_eq!(b.len(), 1);
        let mut sorted = b[0].clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn drop_last_tail() {
        let plan = BatchPlan { seed: 3, batch_size: 3, drop_last: true };
        let b = make_batches(10, &plan).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.iter().map(Vec::len).sum::<usize>(), 9);
        assert_eq!(b, make_batches(10, &plan).unwrap());
        let keep = make_batches(10, &BatchPlan { drop_last: false, ..plan }).unwrap();
        assert_eq!(keep.len(), 4);
    }

    #[test]
    fn empty_plan_and_zero_batch() {
        let plan = BatchPlan { seed: 0, batch_size: 11, drop_last: true };
        assert!(matches!(make_batches(10, &plan), Err(DataError::EmptyPlan { .. })));
        let plan = BatchPlan { seed: 0, batch_size: 0, drop_last: false };
        assert_eq!(make_batches(10, &plan), Err(DataError::ZeroBatch));
    }

    #[test]
    fn seeds_change_order() {
        let base = shuffled_order(10, 0);
        let differing = (1..=20).filter(|&s| shuffled_order(10, s) != base).count();
        // Two random permutations of 10 agree with probability 1/10!.
        assert_eq!(differing, 20);
        assert_eq!(shuffled_order(10, 0), base);
    }
}
