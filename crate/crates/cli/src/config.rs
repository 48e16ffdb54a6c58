//! Run configuration file (TOML).
//!
//! ```toml
//! seed = 42
//! jobs = 4
//!
//! [reward]
//! alpha = 15.0
//!
//! [prompt]
//! template = "asu-zh"
//!
//! [generate]
//! backend = "http"
//! endpoint = "https://example.org/v1/generate"
//! model = "my-model"
//! auth = "ASU_API_KEY"      # name of the variable, never the key
//!
//! [simulate]
//! builtin = "faithful"
//! steps = 500
//! ```
//!
//! Command-line flags override values from this file, which override
//! built-in defaults. A document with a top-level `candidates` array is a
//! bare simulation scenario and is used as the `[simulate]` section.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chatasu::reward::RewardConfig;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    /// Directory for run manifests.
    pub out: Option<PathBuf>,
    pub reward: Option<RewardConfig>,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub generate: GenerateSection,
    pub simulate: Option<toml::Table>,
    #[serde(skip)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    pub template: Option<String>,
    pub template_file: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub backend: Option<String>,
    pub behavior: Option<String>,
    pub candidates: Option<usize>,
    pub scores: Option<usize>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub auth: Option<String>,
    pub timeout_secs: Option<f64>,
    pub max_retries: Option<usize>,
    pub backoff_ms: Option<u64>,
    pub max_in_flight: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let mut cfg = if table.contains_key("candidates") {
            RunConfig { simulate: Some(table), ..RunConfig::default() }
        } else {
            RunConfig::deserialize(table).with_context(|| format!("parsing config {}", path.display()))?
        };
        cfg.path = Some(path.to_path_buf());
        Ok(cfg)
    }

    /// Directory that relative paths inside the config are resolved against.
    pub fn base_dir(&self) -> Option<&Path> {
        self.path.as_deref().and_then(Path::parent)
    }
}
