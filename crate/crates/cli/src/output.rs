//! File output and run manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Writes `content` to `path` through a temporary file in the same
/// directory, so readers never see a partial file.
pub fn write_atomic(path: &Path, content: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp =
        tempfile::NamedTempFile::new_in(&dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(content)?;
    tmp.flush()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(FileDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
    }
}

/// Record of one run: enough to repeat it and check the outputs.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub config: Option<FileDigest>,
    /// Digest of the effective settings after merging flags, config and defaults.
    pub settings_sha256: String,
    pub settings: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

/// Collects what a subcommand read and wrote while it runs.
#[derive(Debug, Default)]
pub struct RunLog {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub settings: serde_json::Map<String, serde_json::Value>,
    pub manifest_dir: Option<PathBuf>,
}

impl RunLog {
    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn setting(&mut self, key: &str, value: impl Serialize) {
        self.settings.insert(key.into(), serde_json::to_value(value).expect("settings serialize"));
    }

    /// Writes `content` to `path` if given, otherwise to standard output.
    pub fn emit(&mut self, path: Option<&Path>, content: &str) -> Result<()> {
        match path {
            Some(p) => {
                write_atomic(p, content.as_bytes())?;
                self.outputs.push(p.to_path_buf());
            }
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(content.as_bytes())?;
                out.flush()?;
            }
        }
        Ok(())
    }
}
