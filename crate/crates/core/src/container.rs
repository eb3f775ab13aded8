//! Binary container shared by model checkpoints and reference log-prob caches.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes   b"PTRNCKPT"
//! version  u32 LE
//! mlen     u64 LE    manifest length in bytes
//! manifest mlen bytes of UTF-8 text
//! payload  row-major little-endian values, entries in manifest order
//! ```
//!
//! Manifest lines: `kind <k>`, then `meta <key> <value>` lines, then one
//! `tensor <name> <dtype> <shape>` line per entry, then `payload_bytes <n>`.
//! `shape` is comma-separated dims, or `scalar`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"PTRNCKPT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContainerError {
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("invalid entry name {0:?}: names must be non-empty and contain no whitespace")]
    Name(String),
}

fn corrupt(msg: impl Into<String>) -> ContainerError {
    ContainerError::Corrupt(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::F64(_) => "f64",
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len() * 4,
            Payload::F64(v) => v.len() * 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub entries: Vec<Entry>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            ..Self::default()
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn encode(&self) -> Result<Vec<u8>, ContainerError> {
        let mut manifest = String::new();
        if !valid_token(&self.kind) {
            return Err(ContainerError::Name(self.kind.clone()));
        }
        manifest.push_str(&format!("kind {}\n", self.kind));
        for (k, v) in &self.meta {
            if !valid_token(k) || v.contains('\n') {
                return Err(ContainerError::Name(k.clone()));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut payload_bytes = 0usize;
        for e in &self.entries {
            if !valid_token(&e.name) {
                return Err(ContainerError::Name(e.name.clone()));
            }
            if e.shape.iter().product::<usize>() != e.payload.len() {
                return Err(corrupt(format!("entry {} has shape {:?} but {} values", e.name, e.shape, e.payload.len())));
            }
            let dims = if e.shape.is_empty() {
                "scalar".to_string()
            } else {
                e.shape.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
            };
            manifest.push_str(&format!("tensor {} {} {}\n", e.name, e.payload.dtype(), dims));
            payload_bytes += e.payload.byte_len();
        }
        manifest.push_str(&format!("payload_bytes {payload_bytes}\n"));

        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload_bytes);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for e in &self.entries {
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < HEADER_LEN {
            return Err(corrupt("truncated header"));
        }
        if bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ContainerError::Version(version));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() < mlen {
            return Err(corrupt("manifest extends past end of file"));
        }
        let manifest = core::str::from_utf8(&body[..mlen]).map_err(|_| corrupt("manifest is not UTF-8"))?;
        let payload = &body[mlen..];

        let mut c = Container::default();
        let mut declared: Option<usize> = None;
        let mut specs: Vec<(String, &str, Vec<usize>)> = Vec::new();
        for (lineno, line) in manifest.lines().enumerate() {
            let bad = || corrupt(format!("manifest line {}: {line:?}", lineno + 1));
            let (tag, rest) = line.split_once(' ').ok_or_else(bad)?;
            match tag {
                "kind" => c.kind = rest.to_string(),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    c.meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let mut parts = rest.split(' ');
                    let (name, dtype, dims) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                        (Some(n), Some(d), Some(s), None) => (n, d, s),
                        _ => return Err(bad()),
                    };
                    if dtype != "f32" && dtype != "f64" {
                        return Err(bad());
                    }
                    let shape = if dims == "scalar" {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse::<usize>().map_err(|_| bad()))
                            .collect::<Result<Vec<_>, _>>()?
                    };
                    specs.push((name.to_string(), dtype, shape));
                }
                "payload_bytes" => declared = Some(rest.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        let declared = declared.ok_or_else(|| corrupt("manifest lacks payload_bytes"))?;
        let expected: usize = specs
            .iter()
            .map(|(_, dtype, shape)| shape.iter().product::<usize>() * if *dtype == "f32" { 4 } else { 8 })
            .sum();
        if declared != expected || payload.len() != expected {
            return Err(corrupt(format!(
                "payload size mismatch: manifest declares {declared} bytes, tensors need {expected}, file has {}",
                payload.len()
            )));
        }
        let mut offset = 0;
        for (name, dtype, shape) in specs {
            let n: usize = shape.iter().product();
            let payload = if dtype == "f32" {
                let v = payload[offset..offset + 4 * n]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect();
                offset += 4 * n;
                Payload::F32(v)
            } else {
                let v = payload[offset..offset + 8 * n]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                offset += 8 * n;
                Payload::F64(v)
            };
            c.entries.push(Entry { name, shape, payload });
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> Container {
        let mut c = Container::new("test");
        c.push_meta("answer", 42);
        c.entries.push(Entry {
            name: "w".into(),
            shape: vec![2, 2],
            payload: Payload::F32(vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]),
        });
        c.entries.push(Entry {
            name: "s".into(),
            shape: vec![],
            payload: Payload::F64(vec![core::f64::consts::PI]),
        });
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.encode().unwrap();
        assert_eq!(&bytes[..8], b"PTRNCKPT");
        assert_eq!(Container::decode(&bytes).unwrap(), c);
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let mut bytes = sample().encode().unwrap();
        bytes.pop();
        assert!(matches!(Container::decode(&bytes), Err(ContainerError::Corrupt(_))));
    }

    #[test]
    fn extra_payload_is_corrupt() {
        let mut bytes = sample().encode().unwrap();
        bytes.push(0);
        assert!(matches!(Container::decode(&bytes), Err(ContainerError::Corrupt(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().encode().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Container::decode(&bytes), Err(ContainerError::Corrupt(_))));
        let mut bytes = sample().encode().unwrap();
        bytes[8] = 9;
        assert_eq!(Container::decode(&bytes), Err(ContainerError::Version(9)));
    }

    #[test]
    fn names_with_spaces_are_rejected() {
        let mut c = Container::new("test");
        c.entries.push(Entry {
            name: "a b".into(),
            shape: vec![1],
            payload: Payload::F32(vec![0.0]),
        });
        assert!(matches!(c.encode(), Err(ContainerError::Name(_))));
    }
}
