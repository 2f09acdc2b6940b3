//! Flat key=value run configuration.
//!
//! A config file holds one `key = value` assignment per line, with `#`
//! comments. `--set key=value` overrides apply after the file, and
//! `--seed N` is shorthand for `--set seed=N`. Unknown keys are rejected,
//! not ignored, and every consumed key lands (with its resolved value,
//! default or not) in the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

/// Raw key-value assignments in file-then-override order.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(CliError::Config(format!("line {}: empty key", lineno + 1)));
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(KvConfig { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config `{}`: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Apply `--set key=value` pairs after the file contents.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set needs key=value, got `{s}`")))?;
            self.map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.map.insert(key.to_string(), value);
    }
}

/// Typed, consuming view over a [`KvConfig`]. Every `take_*` removes the
/// key and records its resolved value; [`Reader::finish`] fails if any
/// key was never consumed.
pub struct Reader {
    map: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Reader {
    pub fn new(cfg: KvConfig) -> Self {
        Reader { map: cfg.map, resolved: BTreeMap::new() }
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse_as<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
        raw.parse().map_err(|_| {
            CliError::Config(format!(
                "key `{key}`: cannot parse `{raw}` as {}",
                std::any::type_name::<T>()
            ))
        })
    }

    fn take_or<T: std::str::FromStr + std::fmt::Display>(&mut self, key: &str, default: T) -> Result<T> {
        let value = match self.take_raw(key) {
            Some(raw) => Self::parse_as(key, &raw)?,
            None => default,
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    pub fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        self.take_or(key, default)
    }

    pub fn u64_or(&mut self, key: &str, default: u64) -> Result<u64> {
        self.take_or(key, default)
    }

    pub fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        self.take_or(key, default)
    }

    pub fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        self.take_or(key, default)
    }

    pub fn string_or(&mut self, key: &str, default: &str) -> Result<String> {
        let value = self.take_raw(key).unwrap_or_else(|| default.to_string());
        self.resolved.insert(key.to_string(), value.clone());
        Ok(value)
    }

    /// A required path to an existing file.
    pub fn existing_path(&mut self, key: &str) -> Result<PathBuf> {
        let raw = self
            .take_raw(key)
            .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))?;
        let path = PathBuf::from(&raw);
        if !path.is_file() {
            return Err(CliError::Config(format!("key `{key}`: file `{raw}` does not exist")));
        }
        self.resolved.insert(key.to_string(), raw);
        Ok(path)
    }

    /// An optional path to an existing file.
    pub fn optional_path(&mut self, key: &str) -> Result<Option<PathBuf>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(raw) if raw.is_empty() => Ok(None),
            Some(raw) => {
                let path = PathBuf::from(&raw);
                if !path.is_file() {
                    return Err(CliError::Config(format!("key `{key}`: file `{raw}` does not exist")));
                }
                self.resolved.insert(key.to_string(), raw);
                Ok(Some(path))
            }
        }
    }

    /// Reject leftovers and hand back the fully resolved assignments.
    pub fn finish(self) -> Result<BTreeMap<String, String>> {
        if !self.map.is_empty() {
            let unknown: Vec<&str> = self.map.keys().map(String::as_str).collect();
            return Err(CliError::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        Ok(self.resolved)
    }
}
