//! Line-delimited corpus files: one JSON record per pair, UTF-8, with
//! byte strings escaped through the 0..=255 codepoint range so arbitrary
//! byte sequences survive the round trip losslessly.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use aam_core::data::{PairMeta, PreferencePair};
use aam_core::model::{Role, TokenSeq};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Bump when the record layout changes.
pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MetaRecord {
    true_gap: f64,
    flipped: bool,
    ambiguous: bool,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    prompt: String,
    chosen: String,
    rejected: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<MetaRecord>,
}

fn bytes_to_escaped(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| char::from_u32(b as u32).unwrap()).collect()
}

fn escaped_to_bytes(s: &str) -> std::result::Result<Vec<u8>, String> {
    s.chars()
        .map(|c| {
            let cp = c as u32;
            u8::try_from(cp).map_err(|_| format!("codepoint U+{cp:04X} is not a byte"))
        })
        .collect()
}

pub fn save_corpus(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    for pair in pairs {
        let record = PairRecord {
            prompt: bytes_to_escaped(&pair.prompt.to_bytes()),
            chosen: bytes_to_escaped(&pair.chosen.to_bytes()),
            rejected: bytes_to_escaped(&pair.rejected.to_bytes()),
            meta: pair.meta.map(|m| MetaRecord {
                true_gap: m.true_gap,
                flipped: m.flipped,
                ambiguous: m.ambiguous,
            }),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| CliError::Io(std::io::Error::other(e)))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<PreferencePair>> {
    let file = std::fs::File::open(path).map_err(|e| {
        CliError::Config(format!("cannot open corpus `{}`: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord = serde_json::from_str(&line).map_err(|e| {
            CliError::Core(aam_core::Error::Contract(format!(
                "corpus `{}` line {}: {e}",
                path.display(),
                lineno + 1
            )))
        })?;
        let decode = |field: &str, s: &str, role: Role| -> Result<TokenSeq> {
            let bytes = escaped_to_bytes(s).map_err(|e| {
                CliError::Core(aam_core::Error::Contract(format!(
                    "corpus `{}` line {}: field `{field}`: {e}",
                    path.display(),
                    lineno + 1
                )))
            })?;
            Ok(TokenSeq::from_bytes(&bytes, role))
        };
        pairs.push(PreferencePair {
            prompt: decode("prompt", &record.prompt, Role::Prompt)?,
            chosen: decode("chosen", &record.chosen, Role::Response)?,
            rejected: decode("rejected", &record.rejected, Role::Response)?,
            meta: record.meta.map(|m| PairMeta {
                true_gap: m.true_gap,
                flipped: m.flipped,
                ambiguous: m.ambiguous,
            }),
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use aam_core::data::{generate_corpus, GeneratorConfig};

    #[test]
    fn corpus_round_trips_losslessly() {
        let cfg = GeneratorConfig {
            n_pairs: 20,
            ambiguity_frac: 0.5,
            flip_prob: 0.25,
            gap_threshold: 0.5,
            seed: 3,
            ..GeneratorConfig::default()
        };
        let (pairs, _) = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_corpus(&path, &pairs).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(pairs, loaded);
        // saving again produces identical bytes
        let first = std::fs::read(&path).unwrap();
        save_corpus(&path, &loaded).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn all_byte_values_survive_the_escape() {
        let bytes: Vec<u8> = (0..=255).collect();
        let s = bytes_to_escaped(&bytes);
        assert_eq!(escaped_to_bytes(&s).unwrap(), bytes);
        assert!(escaped_to_bytes("\u{0100}").is_err());
    }

    #[test]
    fn truncated_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"prompt\":\"a\",\"chosen\":\"b\",\"rejected\":\"c\"}\n{\"prompt\":\"a\",\"chos",
        )
        .unwrap();
        let err = load_corpus(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn meta_is_optional_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nometa.jsonl");
        std::fs::write(&path, "{\"prompt\":\"ab\",\"chosen\":\"cd\",\"rejected\":\"ef\"}\n").unwrap();
        let pairs = load_corpus(&path).unwrap();
        assert_eq!(pairs.len(), 1);
        assert!(pairs[0].meta.is_none());
    }
}
