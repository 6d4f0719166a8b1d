//! Per-run provenance records.
//!
//! Every command that writes artifacts leaves a manifest next to them
//! capturing the resolved configuration, the seed, the hash of the corpus
//! it read, and the code version: enough to reproduce the run. Manifests
//! contain no timestamps so that repeated runs stay byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{cfg_err, Result};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Files hashed into a corpus identity, in fixed order.
const CORPUS_FILES: [&str; 4] = [
    strata_data::MANIFEST_FILE,
    strata_data::IMAGES_FILE,
    strata_data::VOCAB_FILE,
    strata_data::META_FILE,
];

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    /// Hash of the corpus directory this run read or wrote, if any.
    pub corpus_hash: Option<String>,
    /// Checkpoint the run started from, if any.
    pub init: Option<String>,
    pub config: Option<RunConfig>,
    /// Remaining command-specific arguments.
    pub args: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            code_version: CODE_VERSION.to_string(),
            ..RunManifest::default()
        }
    }
}

/// Digest of a generated corpus directory: the four corpus files hashed
/// in a fixed order, length-prefixed.
pub fn corpus_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in CORPUS_FILES {
        let path = dir.join(name);
        let bytes = fs::read(&path)
            .map_err(|e| cfg_err(format!("corpus file {} unreadable: {e}", path.display())))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}

fn write(path: &Path, m: &RunManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    fs::write(path, text)
        .map_err(|e| cfg_err(format!("cannot write manifest {}: {e}", path.display())))?;
    Ok(())
}

/// Manifest for a command whose output is a directory.
pub fn write_dir_manifest(out_dir: &Path, m: &RunManifest) -> Result<()> {
    write(&out_dir.join("run_manifest.json"), m)
}

/// Manifest for a command whose output is a single file; lands next to it
/// as `<stem>_manifest.json`.
pub fn write_file_manifest(out_file: &Path, m: &RunManifest) -> Result<()> {
    let stem = out_file
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| cfg_err(format!("output path {} has no stem", out_file.display())))?;
    let path: PathBuf = out_file.with_file_name(format!("{stem}_manifest.json"));
    write(&path, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_hash_changes_with_any_file() {
        let dir = tempfile::tempdir().unwrap();
        for name in CORPUS_FILES {
            fs::write(dir.path().join(name), name.as_bytes()).unwrap();
        }
        let h0 = corpus_hash(dir.path()).unwrap();
        assert_eq!(h0, corpus_hash(dir.path()).unwrap());
        fs::write(dir.path().join(CORPUS_FILES[1]), b"changed").unwrap();
        assert_ne!(h0, corpus_hash(dir.path()).unwrap());
    }

    #[test]
    fn missing_corpus_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = corpus_hash(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn file_manifest_lands_next_to_the_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("report.json");
        let mut m = RunManifest::new("eval");
        m.args.insert("metrics".into(), "bleu".into());
        write_file_manifest(&out, &m).unwrap();
        let text = fs::read_to_string(dir.path().join("report_manifest.json")).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.command, "eval");
        assert_eq!(back.args["metrics"], "bleu");
        assert!(back.config.is_none());
    }
}
