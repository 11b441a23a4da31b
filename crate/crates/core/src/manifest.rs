//! Run manifests: a schema-stable JSON record of what a command did,
//! with a content hash of the model config and no timestamps so that
//! repeated runs produce identical bytes.

use crate::error::{Error, Result};
use crate::vit::ModelConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub schema: u32,
    pub command: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub params: serde_json::Value,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Hex SHA-256 of the config's canonical JSON encoding.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn success(command: &str, params: serde_json::Value) -> Self {
        Manifest {
            schema: MANIFEST_SCHEMA,
            command: command.to_string(),
            status: "success".to_string(),
            config_hash: None,
            params,
            outputs: Vec::new(),
            error: None,
        }
    }

    pub fn failure(command: &str, params: serde_json::Value, error: &str) -> Self {
        Manifest {
            schema: MANIFEST_SCHEMA,
            command: command.to_string(),
            status: "error".to_string(),
            config_hash: None,
            params,
            outputs: Vec::new(),
            error: Some(error.to_string()),
        }
    }

    pub fn with_config(mut self, cfg: &ModelConfig) -> Self {
        self.config_hash = Some(config_hash(cfg));
        self
    }

    pub fn with_output(mut self, path: impl Into<String>) -> Self {
        self.outputs.push(path.into());
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            num_classes: 4,
            channels: 1,
        }
    }

    #[test]
    fn hash_is_stable_and_hex() {
        let a = config_hash(&cfg());
        let b = config_hash(&cfg());
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert!(a.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn hash_changes_with_config() {
        let mut other = cfg();
        other.num_heads = 4;
        assert_ne!(config_hash(&cfg()), config_hash(&other));
    }

    #[test]
    fn manifest_json_is_byte_stable() {
        let m = Manifest::success("interpret", serde_json::json!({"scheme": "complete"}))
            .with_config(&cfg())
            .with_output("out.png");
        assert_eq!(m.to_json(), m.to_json());
        assert!(!m.to_json().contains("time"));
    }

    #[test]
    fn failure_manifest_carries_error() {
        let m = Manifest::failure("interpret", serde_json::json!({}), "bad image");
        let json = m.to_json();
        assert!(json.contains("\"status\": \"error\""));
        assert!(json.contains("bad image"));
    }
}
