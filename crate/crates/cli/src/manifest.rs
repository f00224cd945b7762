//! Run manifests and atomic output files.
//!
//! Every command writes its outputs first and `manifest.json` last. Each file
//! goes to a temporary sibling and is renamed into place, so a directory
//! never holds a half-written file. The manifest schema is described in
//! `docs/manifest.md`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_SCHEMA: &str = "scann-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub train: u64,
    pub sampler: u64,
    pub holdout: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        use scann::sampler::derive_seed;
        Seeds {
            master,
            train: derive_seed(master, "train"),
            sampler: derive_seed(master, "sampler"),
            holdout: derive_seed(master, "holdout"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub schema: String,
    pub command: String,
    pub scann_version: String,
    pub config: serde_json::Value,
    pub seeds: Seeds,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub timings_ms: BTreeMap<String, u64>,
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Collects named outputs of a command and writes them under one directory.
#[derive(Debug, Default)]
pub struct OutputSet {
    files: Vec<(String, Vec<u8>)>,
}

impl OutputSet {
    pub fn add(&mut self, rel: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((rel.into(), bytes));
    }

    pub fn get(&self, rel: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == rel).map(|(_, b)| b.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    /// Writes every file, then the manifest listing them.
    pub fn commit(&self, dir: &Path, mut manifest: ExperimentManifest) -> CliResult<PathBuf> {
        manifest.outputs.clear();
        for (rel, bytes) in &self.files {
            write_atomic(&dir.join(rel), bytes)?;
            manifest.outputs.push(FileEntry {
                path: rel.clone(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            });
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
        write_atomic(&path, &json)?;
        Ok(path)
    }
}

pub fn input_entry(path: &Path) -> CliResult<FileEntry> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(FileEntry {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}
