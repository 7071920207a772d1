//! Run manifests: every command leaves a `manifest.json` naming the library
//! version, a hash of the effective config, and the files it wrote.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// The effective configuration (after flag overrides).
    pub config: serde_json::Value,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        let canonical = serde_json::to_string(&config).expect("json value serializes");
        Self {
            command: command.into(),
            version: hipandas::VERSION.into(),
            config_sha256: sha256_hex(canonical.as_bytes()),
            seed,
            config,
            files: Vec::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        Ok(serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn hash_depends_on_config_only() {
        let a = Manifest::new("x", serde_json::json!({"a": 1}), Some(1));
        let b = Manifest::new("y", serde_json::json!({"a": 1}), Some(2));
        let c = Manifest::new("x", serde_json::json!({"a": 2}), Some(1));
        assert_eq!(a.config_sha256, b.config_sha256);
        assert_ne!(a.config_sha256, c.config_sha256);
        assert_eq!(a.version, hipandas::VERSION);
    }
}
