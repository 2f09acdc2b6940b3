//! Run manifests. Every subcommand writes one: the resolved configuration
//! (defaults included), checksums of every input file, artifact format
//! versions, and the produced outputs — enough to reproduce the run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::CHECKPOINT_FORMAT_VERSION;
use crate::corpus_io::CORPUS_FORMAT_VERSION;
use crate::error::{CliError, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArtifactVersions {
    pub manifest: u32,
    pub corpus: u32,
    pub checkpoint: u32,
}

impl Default for ArtifactVersions {
    fn default() -> Self {
        ArtifactVersions {
            manifest: MANIFEST_FORMAT_VERSION,
            corpus: CORPUS_FORMAT_VERSION,
            checkpoint: CHECKPOINT_FORMAT_VERSION,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub versions: ArtifactVersions,
    /// Fully resolved key=value configuration, overrides applied.
    pub config: BTreeMap<String, String>,
    /// Checksums (FNV-1a hex) of every input file, keyed by config key.
    pub inputs: BTreeMap<String, String>,
    /// Paths of produced artifacts, relative to the output directory.
    pub outputs: Vec<String>,
    /// Fingerprint of the corpus this run produced or consumed, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_fingerprint: Option<String>,
}

/// FNV-1a over raw file bytes.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(format!("{h:016x}"))
}

impl RunManifest {
    pub fn new(command: &str, config: BTreeMap<String, String>) -> Self {
        RunManifest {
            command: command.to_string(),
            versions: ArtifactVersions::default(),
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            corpus_fingerprint: None,
        }
    }

    pub fn record_input(&mut self, key: &str, path: &Path) -> Result<()> {
        self.inputs.insert(key.to_string(), file_checksum(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Io(std::io::Error::other(e)))?;
        std::fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read manifest `{}`: {e}", path.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::Core(aam_core::Error::Contract(format!(
                "manifest `{}`: {e}",
                path.display()
            )))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let mut config = BTreeMap::new();
        config.insert("seed".into(), "7".into());
        let mut m = RunManifest::new("gen-data", config);
        m.record_output("corpus.jsonl");
        m.corpus_fingerprint = Some("00000000000000ff".into());
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let loaded = RunManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded, m);
    }
}
