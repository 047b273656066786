//! Sibling `<file>.manifest.json` records. A manifest holds the exact command
//! that produced its file, so `camr replay` can regenerate it.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Command;

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct FormatVersions {
    pub camr_binary: u16,
    /// `label,f1,...,fd`, no header.
    pub csv: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: Command,
    /// Everything the command derived from its flags and inputs.
    pub resolved: Value,
    pub seed: Option<u64>,
    pub format_versions: FormatVersions,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &Command, resolved: Value, seed: Option<u64>, outputs: &[PathBuf]) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.clone(),
            resolved,
            seed,
            format_versions: FormatVersions {
                camr_binary: camr::store::FORMAT_VERSION,
                csv: "label-first".to_string(),
            },
            outputs: outputs.to_vec(),
        }
    }

    /// Writes one manifest next to every output.
    pub fn write_all(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        for out in &self.outputs {
            let path = manifest_path(out);
            fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(MANIFEST_SUFFIX);
    PathBuf::from(name)
}
