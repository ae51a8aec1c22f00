use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use u5mr_core::io::write_atomic_str;
use u5mr_core::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

/// Record of one subcommand run. Paths are relative to the output directory
/// when they lie inside it, so manifests do not depend on where a run lives.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub config_path: Option<String>,
    pub config_digest: String,
    pub seed: u64,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

fn display(path: &Path, root: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}

fn entry(path: &Path, root: &Path) -> Result<FileEntry> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileEntry {
        path: display(path, root),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

impl RunManifest {
    pub fn new(subcommand: &str, config_path: Option<&Path>, digest: String, seed: u64) -> Self {
        Self {
            subcommand: subcommand.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_path: config_path.map(|p| p.display().to_string()),
            config_digest: digest,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Hashes the listed files and writes `<subcommand>.manifest.json` into
    /// `root`.
    pub fn write(mut self, root: &Path, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<PathBuf> {
        self.inputs = inputs.iter().map(|p| entry(p, root)).collect::<Result<_>>()?;
        self.outputs = outputs.iter().map(|p| entry(p, root)).collect::<Result<_>>()?;
        let path = root.join(format!("{}.manifest.json", self.subcommand));
        write_atomic_str(&path, &(serde_json::to_string_pretty(&self)? + "\n"))?;
        Ok(path)
    }
}
