use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

/// Record of one command: what it read, which seeds it used, what it wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seeds: serde_json::Value,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    #[serde(default)]
    pub details: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Builds manifests for files under one run directory.
pub struct ManifestBuilder {
    root: PathBuf,
    manifest: Manifest,
}

impl ManifestBuilder {
    pub fn new(root: &Path, command: &str, seeds: serde_json::Value) -> Self {
        ManifestBuilder {
            root: root.to_path_buf(),
            manifest: Manifest { command: command.into(), seeds, inputs: vec![], outputs: vec![], details: serde_json::Value::Null },
        }
    }

    fn entry(&self, path: &Path) -> anyhow::Result<FileEntry> {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        Ok(FileEntry { path: rel.to_string_lossy().replace('\\', "/"), sha256: sha256_file(path)? })
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let e = self.entry(path)?;
        self.manifest.inputs.push(e);
        Ok(())
    }

    /// Hashes an output as it now sits on disk.
    pub fn output(&mut self, path: &Path) -> anyhow::Result<()> {
        let e = self.entry(path)?;
        self.manifest.outputs.push(e);
        Ok(())
    }

    pub fn details(&mut self, value: serde_json::Value) {
        self.manifest.details = value;
    }

    /// Writes `manifest.json` into `dir` and checks that every output still
    /// hashes to its recorded digest.
    pub fn finish(self, dir: &Path) -> anyhow::Result<Manifest> {
        for out in &self.manifest.outputs {
            let now = sha256_file(&self.root.join(&out.path))?;
            if now != out.sha256 {
                anyhow::bail!("output {} changed while the command ran", out.path);
            }
        }
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(dir: &Path) -> anyhow::Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}
