//! Run manifests: every command records its resolved arguments, seeds, and
//! the digests of its input and output files. Re-running a command with the
//! same manifest inputs reproduces the outputs bit-exactly.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn new(command: &str, args: serde_json::Value, seed: Option<u64>) -> Self {
        RunManifest {
            tool: "gridlm".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.push(FileDigest { path: path.display().to_string(), sha256: file_sha256(path)? });
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> std::io::Result<()> {
        self.outputs.push(FileDigest { path: path.display().to_string(), sha256: file_sha256(path)? });
        Ok(())
    }

    /// Write `manifest.json` into the output directory and return its path.
    pub fn write(&self, out_dir: &Path) -> std::io::Result<PathBuf> {
        let path = out_dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        Ok(path)
    }
}
