//! Run manifests: enough to repeat a run and check that it reproduced.

use std::path::{Path, PathBuf};

use gchoreo::io::{read_bytes, sha256_file, write_atomic, FORMAT_VERSION, SCENARIO_VERSION};
use gchoreo::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Versions {
    pub gchoreo: String,
    pub container_format: u32,
    pub scenario_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Versions {
            gchoreo: env!("CARGO_PKG_VERSION").into(),
            container_format: FORMAT_VERSION,
            scenario_format: SCENARIO_VERSION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    /// Arguments after the program name, verbatim.
    pub argv: Vec<String>,
    /// Working directory that relative paths in `argv` resolve against.
    pub cwd: String,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub seed: u64,
    pub threads: usize,
    /// Effective configuration after defaults, when the command takes one.
    pub config: Option<serde_json::Value>,
    pub versions: Versions,
    pub wall_time_s: f64,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        serde_json::from_slice(&bytes).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: "manifest".into(),
            source,
        })?;
        write_atomic(&path, format!("{text}\n").as_bytes())?;
        Ok(path)
    }

    pub fn output(&self, role: &str) -> Option<&FileEntry> {
        self.outputs.iter().find(|e| e.role == role)
    }
}

/// Collects the files a command reads and writes.
#[derive(Default)]
pub struct Record {
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

fn entry(role: &str, path: &Path) -> Result<FileEntry> {
    Ok(FileEntry {
        role: role.into(),
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

impl Record {
    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.push(entry(role, path)?);
        Ok(())
    }

    pub fn output(&mut self, role: &str, path: &Path) -> Result<()> {
        self.outputs.push(entry(role, path)?);
        Ok(())
    }
}
