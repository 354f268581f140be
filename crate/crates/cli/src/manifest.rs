//! Reproduction records written next to every command's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// The command's flags after merging config files, as parsed.
    pub options: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    /// Output files, relative to the output directory.
    pub outputs: Vec<FileDigest>,
    /// Command-specific extras (e.g. the runs behind a sweep).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, options: &impl Serialize, seeds: Vec<u64>) -> Result<Self> {
        Ok(Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            options: serde_json::to_value(options).map_err(|e| CliError::Manifest(e.to_string()))?,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
            details: serde_json::Value::Null,
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    /// Hashes `names` inside `out` and writes the manifest there.
    pub fn finish(mut self, out: &Path, names: &[&str]) -> Result<PathBuf> {
        for name in names {
            let digest = FileDigest::of(&out.join(name))?;
            self.outputs.push(FileDigest {
                path: PathBuf::from(name),
                sha256: digest.sha256,
            });
        }
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).map_err(|e| CliError::Manifest(e.to_string()))?;
        write(&path, text)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Manifest(format!("{}: {e}", path.display())))
    }

    /// Fails when a recorded input no longer has the recorded contents.
    pub fn check_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let now = FileDigest::of(&input.path)?;
            if now.sha256 != input.sha256 {
                return Err(CliError::Manifest(format!(
                    "{} changed since the manifest was written",
                    input.path.display()
                )));
            }
        }
        Ok(())
    }
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// The output directory must already exist.
pub fn require_dir(path: &Path) -> Result<()> {
    match std::fs::metadata(path) {
        Ok(m) if m.is_dir() => Ok(()),
        Ok(_) => Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotADirectory, "not a directory"),
        )),
        Err(e) => Err(CliError::io(path, e)),
    }
}
