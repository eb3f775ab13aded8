//! File IO for checkpoints, reference caches and run artifacts. Every
//! artifact is written atomically (temp file in the target directory, then
//! rename).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use posttrain_core::container::ContainerError;
use posttrain_core::dpo::RefLogpCache;
use posttrain_core::model::{ModelCheckpoint, ModelError};
use posttrain_core::rm::RewardModel;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt file: {source}")]
    Model {
        path: PathBuf,
        #[source]
        source: ModelError,
    },
    #[error("{path}: corrupt file: {source}")]
    Container {
        path: PathBuf,
        #[source]
        source: ContainerError,
    },
}

impl IoError {
    pub fn fs(path: &Path, source: std::io::Error) -> Self {
        IoError::Fs {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn is_not_found(&self) -> bool {
        matches!(self, IoError::Fs { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| IoError::fs(path, e))
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| IoError::fs(path, e))
}

/// Writes `bytes` to `path` via a temporary sibling file and a rename, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| IoError::fs(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::fs(dir, e))?;
    tmp.write_all(bytes).map_err(|e| IoError::fs(path, e))?;
    tmp.as_file().sync_all().map_err(|e| IoError::fs(path, e))?;
    tmp.persist(path).map_err(|e| IoError::fs(path, e.error))?;
    Ok(())
}

pub fn save_checkpoint(model: &ModelCheckpoint, path: &Path) -> Result<(), IoError> {
    write_atomic(path, &model.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, IoError> {
    ModelCheckpoint::from_bytes(&read_bytes(path)?).map_err(|source| IoError::Model {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_reward_model(rm: &RewardModel, path: &Path) -> Result<(), IoError> {
    write_atomic(path, &rm.to_bytes())
}

pub fn load_reward_model(path: &Path) -> Result<RewardModel, IoError> {
    RewardModel::from_bytes(&read_bytes(path)?).map_err(|source| IoError::Model {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_ref_cache(cache: &RefLogpCache, path: &Path) -> Result<(), IoError> {
    write_atomic(path, &cache.to_bytes())
}

pub fn load_ref_cache(path: &Path) -> Result<RefLogpCache, IoError> {
    RefLogpCache::from_bytes(&read_bytes(path)?).map_err(|source| IoError::Container {
        path: path.to_path_buf(),
        source,
    })
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, IoError> {
    Ok(sha256_hex(&read_bytes(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use posttrain_core::model::ModelConfig;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.ckpt");
        let m = ModelCheckpoint::init(ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.logits(&[1, 5, 9]).unwrap(), m.logits(&[1, 5, 9]).unwrap());
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = ModelCheckpoint::init(ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        let bytes = m.to_bytes();
        write_atomic(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(IoError::Model { .. })));
        assert!(load_checkpoint(&dir.path().join("missing")).unwrap_err().is_not_found());
    }
}
