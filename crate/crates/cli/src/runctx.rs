//! Run bookkeeping: layered config resolution, atomic output writes, and the
//! run manifest emitted alongside every output file.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use densesteer_core::model::CONTAINER_FORMAT_VERSION;
use densesteer_core::steering::VECTOR_FORMAT_VERSION;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Settings that resolve through the flags > environment > config-file chain.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct LayeredConfig {
    pub backend: Option<String>,
    pub workers: Option<usize>,
    pub max_new_tokens: Option<usize>,
}

impl LayeredConfig {
    fn overlay(&mut self, other: LayeredConfig) {
        if other.backend.is_some() {
            self.backend = other.backend;
        }
        if other.workers.is_some() {
            self.workers = other.workers;
        }
        if other.max_new_tokens.is_some() {
            self.max_new_tokens = other.max_new_tokens;
        }
    }

    fn from_env() -> Self {
        let get = |name: &str| std::env::var(name).ok();
        Self {
            backend: get("DENSESTEER_BACKEND"),
            workers: get("DENSESTEER_WORKERS").and_then(|v| v.parse().ok()),
            max_new_tokens: get("DENSESTEER_MAX_NEW_TOKENS").and_then(|v| v.parse().ok()),
        }
    }
}

/// Fully resolved shared settings.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Resolved {
    pub backend: String,
    pub workers: Option<usize>,
    pub max_new_tokens: usize,
}

/// Resolve flags over environment over an optional TOML config file.
pub fn resolve_config(config_file: Option<&Path>, flags: LayeredConfig) -> Result<Resolved> {
    let mut layered = LayeredConfig::default();
    if let Some(path) = config_file {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let from_file: LayeredConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))?;
        layered.overlay(from_file);
    }
    layered.overlay(LayeredConfig::from_env());
    layered.overlay(flags);
    Ok(Resolved {
        backend: layered.backend.unwrap_or_else(|| "micro".to_string()),
        workers: layered.workers,
        max_new_tokens: layered.max_new_tokens.unwrap_or(2048),
    })
}

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    tool_version: &'static str,
    format_versions: FormatVersions,
    resolved_config: serde_json::Value,
    inputs: &'a [FileDigest],
    outputs: &'a [FileDigest],
    duration_ms: u128,
}

#[derive(Debug, Serialize)]
struct FormatVersions {
    weights: u32,
    vector: u32,
    report_schema: u32,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing input {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Write `bytes` to `path` atomically: temp file in the same directory, then
/// rename. An interrupted run never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let dir = dir.map(Path::to_path_buf).unwrap_or_else(|| ".".into());
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)
        .with_context(|| format!("creating temp file near {}", path.display()))?;
    use std::io::Write;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Tracks a run's inputs and outputs and emits a manifest next to each
/// output once the command finishes.
pub struct RunContext {
    subcommand: String,
    resolved_config: serde_json::Value,
    started: Instant,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

impl RunContext {
    pub fn new(subcommand: &str, resolved_config: serde_json::Value) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            resolved_config,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Record (and hash) an input file.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Atomically write one output file and record its checksum.
    pub fn write_output(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.outputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    /// Emit `<output>.manifest.json` beside every recorded output.
    pub fn finish(self) -> Result<()> {
        let manifest = RunManifest {
            subcommand: &self.subcommand,
            tool_version: env!("CARGO_PKG_VERSION"),
            format_versions: FormatVersions {
                weights: CONTAINER_FORMAT_VERSION,
                vector: VECTOR_FORMAT_VERSION,
                report_schema: REPORT_SCHEMA_VERSION,
            },
            resolved_config: self.resolved_config,
            inputs: &self.inputs,
            outputs: &self.outputs,
            duration_ms: self.started.elapsed().as_millis(),
        };
        let bytes = serde_json::to_vec_pretty(&manifest)?;
        for output in &self.outputs {
            let manifest_path = PathBuf::from(format!("{}.manifest.json", output.path));
            write_atomic(&manifest_path, &bytes)?;
        }
        Ok(())
    }
}

pub fn version_string() -> &'static str {
    static VERSION: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    VERSION
        .get_or_init(|| {
            format!(
                "{} (weights-format v{CONTAINER_FORMAT_VERSION}, vector-format v{VECTOR_FORMAT_VERSION}, report-schema v{REPORT_SCHEMA_VERSION})",
                env!("CARGO_PKG_VERSION")
            )
        })
        .as_str()
}
