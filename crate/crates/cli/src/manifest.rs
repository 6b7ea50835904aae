use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use retgen::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

/// Written next to every output so the command can be re-run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub warnings: Vec<String>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileRecord::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileRecord::of(path)?);
        Ok(())
    }

    /// Location of the manifest for an output file or directory.
    pub fn path_for(out: &Path) -> PathBuf {
        if out.is_dir() {
            out.join("manifest.json")
        } else {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            out.with_file_name(name)
        }
    }

    pub fn write(mut self, out: &Path) -> Result<PathBuf> {
        self.finished_at = now();
        let path = Self::path_for(out);
        std::fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
