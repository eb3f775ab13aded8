//! Byte-level tokenizer: three special tokens followed by the 256 byte values.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Number of special tokens; byte `b` maps to id `b + BYTE_OFFSET`.
pub const BYTE_OFFSET: u32 = 3;
pub const BYTE_VOCAB: usize = 256 + BYTE_OFFSET as usize;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    /// Original bytes, when the sequence came from text.
    pub text: Option<Vec<u8>>,
}

impl TokenSeq {
    pub fn from_ids(ids: Vec<u32>) -> Self {
        Self { ids, text: None }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// All ids below `vocab_size`.
    pub fn is_valid_for(&self, vocab_size: usize) -> bool {
        self.ids.iter().all(|&id| (id as usize) < vocab_size)
    }
}

pub fn tokenize(bytes: &[u8]) -> TokenSeq {
    TokenSeq {
        ids: encode_bytes(bytes),
        text: Some(bytes.to_vec()),
    }
}

pub fn encode_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32 + BYTE_OFFSET).collect()
}

/// Byte payload of a sequence; special tokens are dropped.
pub fn detokenize(seq: &TokenSeq) -> Vec<u8> {
    decode_ids(&seq.ids)
}

pub fn decode_ids(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| (BYTE_OFFSET..BYTE_OFFSET + 256).contains(&id))
        .map(|&id| (id - BYTE_OFFSET) as u8)
        .collect()
}

/// Lossy UTF-8 rendering of the byte payload.
pub fn decode_lossy(ids: &[u32]) -> String {
    String::from_utf8_lossy(&decode_ids(ids)).into_owned()
}
