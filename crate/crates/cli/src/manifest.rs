//! Run manifests: every command records its inputs and hashes its outputs so
//! a run can be verified and reproduced (wall-clock fields aside).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cmfd::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
pub struct OutputRecord {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    /// Flat-text snapshot of the effective config, when the command has one.
    pub config: Option<String>,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<OutputRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl RunManifest {
    pub fn start(command: &str, seed: Option<u64>, config: Option<String>) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed,
            config,
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: String::new(),
            outputs: Vec::new(),
        }
    }

    /// Hash `files` (relative to `dir`), stamp the finish time, and write
    /// `run_manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path, files: &[PathBuf]) -> Result<PathBuf> {
        for f in files {
            let abs = dir.join(f);
            self.outputs.push(OutputRecord {
                path: f.to_string_lossy().into_owned(),
                sha256: sha256_file(&abs)?,
            });
        }
        self.finished_at = chrono::Utc::now().to_rfc3339();
        let path = dir.join("run_manifest.json");
        let json = serde_json::to_string_pretty(&self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Files belonging to a dataset rooted at `root`, relative to `base`.
pub fn dataset_files(base: &Path, root: &Path) -> Result<Vec<PathBuf>> {
    let rel = root.strip_prefix(base).unwrap_or(root);
    let ds = cmfd::data::read_dataset(root)?;
    let mut files = vec![rel.join("manifest.txt")];
    for e in &ds.manifest.entries {
        files.push(rel.join(&e.image_path));
        files.push(rel.join(&e.mask_path));
    }
    Ok(files)
}

/// Resolve an output path against the `CMFD_OUT_ROOT` environment variable:
/// relative paths land under the override root when it is set.
pub fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os("CMFD_OUT_ROOT") {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
