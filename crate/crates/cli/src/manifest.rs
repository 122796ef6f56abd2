//! Output directory bookkeeping and the per-command run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA: &str = include_str!("../schema/run_manifest.schema.json");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    fn of(path: String, bytes: &[u8]) -> Self {
        Self {
            path,
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        }
    }
}

/// What a command read, what it wrote and how it was invoked. Carries no
/// timestamps so reruns reproduce it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    /// Files written by the command, relative to the output directory,
    /// sorted by path. The manifest does not list itself.
    pub outputs: Vec<FileDigest>,
    pub toolkit_version: String,
}

/// Collects inputs and outputs of one command invocation.
pub struct Run {
    command: String,
    args: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    root: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: BTreeMap<String, FileDigest>,
}

impl Run {
    pub fn new(command: &str, args: &impl Serialize, out: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(out)
            .map_err(|e| CliError::Data(format!("cannot create output directory {}: {e}", out.display())))?;
        Ok(Self {
            command: command.to_string(),
            args: serde_json::to_value(args).context("serializing arguments")?,
            seeds: BTreeMap::new(),
            root: out.to_path_buf(),
            inputs: Vec::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    /// Reads an input file and records its digest.
    pub fn read_input(&mut self, path: &Path) -> anyhow::Result<Vec<u8>> {
        let bytes = fs::read(path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        self.inputs.push(FileDigest::of(path.display().to_string(), &bytes));
        Ok(bytes)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)
                .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
        }
        fs::write(&path, bytes)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        self.outputs.insert(rel.to_string(), FileDigest::of(rel.to_string(), bytes));
        Ok(())
    }

    pub fn write_json(&mut self, rel: &str, value: &impl Serialize) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value).context("serializing output")?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn finish(self) -> anyhow::Result<RunManifest> {
        let mut run = self;
        let manifest = RunManifest {
            command: run.command.clone(),
            args: run.args.clone(),
            seeds: run.seeds.clone(),
            inputs: run.inputs.clone(),
            outputs: std::mem::take(&mut run.outputs).into_values().collect(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).context("serializing manifest")?;
        text.push('\n');
        let path = run.root.join(MANIFEST_FILE);
        fs::write(&path, text)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        Ok(manifest)
    }
}
