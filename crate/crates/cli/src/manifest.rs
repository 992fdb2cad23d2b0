//! Per-run provenance record written next to every command's outputs.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, exactly as given.
    pub args: Vec<String>,
    /// Fully resolved settings after applying the config file and flags.
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub checkpoint: Option<FileHash>,
    pub outputs: Vec<FileHash>,
    pub seed: Option<u64>,
    pub version: String,
    pub wall_time_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Hashes a file, or every file below a directory in sorted order.
pub fn hash_inputs(path: &Path) -> Result<Vec<FileHash>> {
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    files
        .into_iter()
        .map(|p| {
            Ok(FileHash {
                sha256: sha256_file(&p)?,
                path: p,
            })
        })
        .collect()
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        for entry in std::fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
            collect_files(&entry?.path(), out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Arguments for re-running the command with outputs redirected to
    /// `out`, or unchanged when `out` is `None`.
    pub fn replay_args(&self, out: Option<&Path>) -> Vec<String> {
        let Some(out) = out else {
            return self.args.clone();
        };
        let mut args = Vec::with_capacity(self.args.len() + 2);
        let mut skip = false;
        for a in &self.args {
            if skip {
                skip = false;
                continue;
            }
            if a == "--out" {
                skip = true;
                continue;
            }
            if a.starts_with("--out=") {
                continue;
            }
            args.push(a.clone());
        }
        args.push("--out".into());
        args.push(out.display().to_string());
        args
    }
}
