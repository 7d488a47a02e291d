//! Run manifests: what a command was given and what it produced, with
//! content hashes of every input.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// No timestamps or host details, so identical runs yield identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub deterministic: bool,
    /// Resolved settings after applying defaults, config file and flags.
    pub config: serde_json::Value,
    /// Where each setting came from: `default`, `file` or `flag`.
    pub config_sources: BTreeMap<String, String>,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, deterministic: bool, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            deterministic,
            config,
            config_sources: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records `path` (a file, or a directory hashed over its sorted entries).
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let sha256 = hash_path(path)?;
        self.inputs.push(InputHash {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Files hash their bytes; directories hash the sorted list of
/// `(relative name, file hash)` over their regular files, recursively.
pub fn hash_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return hash_file(path);
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (name, digest) in files {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(digest.as_bytes());
        h.update(*b"\n");
    }
    Ok(hex(&h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            out.push((rel, hash_file(&path)?));
        }
    }
    Ok(())
}
