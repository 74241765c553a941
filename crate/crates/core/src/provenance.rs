//! Provenance stamps and content hashing shared by every artifact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Embedded in every persisted artifact so a chain of stages can be traced
/// back to one master seed and one configuration per stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub master_seed: u64,
    /// SHA-256 of the stage configuration, serialized as JSON.
    pub config_hash: String,
}

impl Provenance {
    pub fn new<C: Serialize>(stage: &str, master_seed: u64, config: &C) -> Result<Self> {
        Ok(Provenance {
            stage: stage.to_owned(),
            master_seed,
            config_hash: hash_json(config)?,
        })
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(hash_bytes(&serde_json::to_vec(value)?))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hash_bytes(&bytes))
}
