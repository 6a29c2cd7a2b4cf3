use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub tool_version: String,
    pub seed: Option<u64>,
    /// Fully resolved configuration, when the command has one.
    pub config: serde_json::Value,
    pub deterministic: bool,
    /// Raw value of `MOLGNN_DETERMINISTIC` at start-up.
    pub deterministic_env: Option<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub warnings: Vec<String>,
    /// Command-specific counts, e.g. rows written.
    pub summary: serde_json::Map<String, serde_json::Value>,
    pub started: String,
    pub finished: String,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut reader = BufReader::new(File::open(path).map_err(|e| CliError::io(path, e))?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Collects manifest fields while a command runs.
pub struct ManifestBuilder {
    manifest: RunManifest,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().collect(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                seed: None,
                config: serde_json::Value::Null,
                deterministic: true,
                deterministic_env: std::env::var("MOLGNN_DETERMINISTIC").ok(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                warnings: Vec::new(),
                summary: serde_json::Map::new(),
                started: now(),
                finished: String::new(),
            },
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.manifest.seed = Some(seed);
        self
    }

    pub fn config(&mut self, config: &impl Serialize) -> CliResult<&mut Self> {
        self.manifest.config = serde_json::to_value(config)?;
        Ok(self)
    }

    pub fn deterministic(&mut self, on: bool) -> &mut Self {
        self.manifest.deterministic = on;
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    pub fn warn(&mut self, msg: impl Into<String>) -> &mut Self {
        self.manifest.warnings.push(msg.into());
        self
    }

    pub fn note(&mut self, key: &str, value: impl Into<serde_json::Value>) -> &mut Self {
        self.manifest.summary.insert(key.to_string(), value.into());
        self
    }

    /// Hashes every registered file and writes the manifest as JSON.
    pub fn finish(mut self, path: &Path) -> CliResult<RunManifest> {
        let digest = |p: &PathBuf| -> CliResult<FileDigest> {
            Ok(FileDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        };
        self.manifest.inputs = self.inputs.iter().map(digest).collect::<CliResult<_>>()?;
        self.manifest.outputs = self.outputs.iter().map(digest).collect::<CliResult<_>>()?;
        self.manifest.finished = now();
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
        Ok(self.manifest)
    }
}
