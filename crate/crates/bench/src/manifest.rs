//! Manifests written beside every dataset.
//!
//! The hash covers everything except the timestamp, so equal manifests give
//! equal hashes and reruns stamp identical rows.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{io_error, BenchError, Result};

/// Version of the CSV layouts emitted by this crate.
pub const CSV_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormatVersions {
    pub checkpoint: u32,
    pub trajectory: u32,
    pub csv: u32,
}

impl Default for FormatVersions {
    fn default() -> Self {
        Self {
            checkpoint: doublewell_rl::checkpoint::FORMAT_VERSION,
            trajectory: doublewell_core::record::LOG_FORMAT_VERSION,
            csv: CSV_FORMAT_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub artifact_version: String,
    /// Command or experiment point that produced the data.
    pub producer: String,
    pub master_seed: u64,
    pub formats: FormatVersions,
    /// Seconds since the Unix epoch; excluded from the hash.
    pub timestamp: u64,
    pub config: RunConfig,
}

#[derive(Serialize)]
struct Hashed<'a> {
    artifact_version: &'a str,
    producer: &'a str,
    master_seed: u64,
    formats: FormatVersions,
    config: &'a RunConfig,
}

impl RunManifest {
    pub fn new(producer: impl Into<String>, config: &RunConfig) -> Self {
        Self {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            producer: producer.into(),
            master_seed: config.seed,
            formats: FormatVersions::default(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config: config.clone(),
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML, timestamp
    /// left out.
    pub fn hash(&self) -> String {
        let hashed = Hashed {
            artifact_version: &self.artifact_version,
            producer: &self.producer,
            master_seed: self.master_seed,
            formats: self.formats,
            config: &self.config,
        };
        let text = toml::to_string(&hashed).expect("validated configs serialize");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(io_error(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        toml::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Scale;

    #[test]
    fn hash_ignores_timestamp_only() {
        let cfg = RunConfig::preset(Scale::Desk);
        let a = RunManifest::new("evolve", &cfg);
        let mut b = a.clone();
        b.timestamp += 100;
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);

        let other = RunManifest::new("evolve", &cfg.with_override("seed", toml::Value::Integer(5)).unwrap());
        assert_ne!(a.hash(), other.hash());
        assert_ne!(a.hash(), RunManifest::new("train", &cfg).hash());
    }

    #[test]
    fn manifest_round_trips() {
        let m = RunManifest::new("x", &RunConfig::preset(Scale::Full));
        let back: RunManifest = toml::from_str(&m.to_toml().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hash(), m.hash());
    }
}
