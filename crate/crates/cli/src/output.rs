use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use xlign_core::Result;

#[derive(Debug, Serialize)]
struct ManifestEntry {
    path: String,
    bytes: usize,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    files: Vec<ManifestEntry>,
}

/// Writes files under one directory and records them for the manifest.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<ManifestEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        self.written.retain(|e| e.path != rel);
        self.written.push(ManifestEntry {
            path: rel.to_string(),
            bytes: contents.len(),
            sha256: hex(&Sha256::digest(contents.as_bytes())),
        });
        Ok(path)
    }

    /// Writes `manifest.json` listing every file written so far.
    pub fn finish(mut self, command: &str) -> Result<PathBuf> {
        self.written.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            command,
            files: std::mem::take(&mut self.written),
        };
        let path = self.root.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
