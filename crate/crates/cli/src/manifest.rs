// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Provenance};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub run: Option<String>,
    pub provenance: Option<Provenance>,
    pub config_sha256: String,
    pub versions: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub wall_clock_seconds: f64,
    pub files: Vec<FileEntry>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> CliResult<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// Digest of the config as resolved, overrides included.
pub fn config_hash(cfg: &ExperimentConfig) -> CliResult<String> {
    Ok(sha256_bytes(&serde_json::to_vec(cfg)?))
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("mipc".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        (
            "checkpoint_format".to_string(),
            mipc_core::trainer::CHECKPOINT_VERSION.to_string(),
        ),
        (
            "permutation_format".to_string(),
            mipc_core::tokenizer::PERMUTATION_FORMAT_VERSION.to_string(),
        ),
    ])
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> CliResult<Self> {
        Ok(Self {
            command: command.to_string(),
            run: None,
            provenance: None,
            config_sha256: config_hash(cfg)?,
            versions: versions(),
            seeds: BTreeMap::new(),
            wall_clock_seconds: 0.0,
            files: Vec::new(),
        })
    }

    /// Records `files`, which must live under `dir`, with their digests.
    pub fn add_files(&mut self, dir: &Path, files: &[PathBuf]) -> CliResult<()> {
        for f in files {
            let rel = f
                .strip_prefix(dir)
                .map_err(|_| CliError::Runtime(format!("{} is outside {}", f.display(), dir.display())))?;
            let bytes = fs::metadata(f).map_err(|e| CliError::io(f, e))?.len();
            self.files.push(FileEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(f)?,
                bytes,
            });
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> CliResult<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks every listed file against its digest.
    pub fn verify(&self, dir: &Path) -> CliResult<()> {
        for f in &self.files {
            let got = sha256_file(dir.join(&f.path))?;
            if got != f.sha256 {
                return Err(CliError::Runtime(format!("{}: digest mismatch", f.path)));
            }
        }
        Ok(())
    }
}
