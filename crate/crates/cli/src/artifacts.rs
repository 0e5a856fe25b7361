//! Output bookkeeping: provenance stamps on JSON documents and per-command
//! manifests listing file hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dora_core::io::{read_json, sha256_hex, write_atomic, write_json_atomic, Provenance};
use dora_core::seed::seed_plan;
use dora_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::SeedSource;

/// Adds a top-level `provenance` object to a JSON document.
pub fn stamp(bytes: &[u8], provenance: &Provenance) -> Result<Vec<u8>, Error> {
    let mut value: Value = serde_json::from_slice(bytes)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::config("document", "expected a JSON object"))?;
    obj.insert("provenance".into(), serde_json::to_value(provenance)?);
    let mut out = serde_json::to_vec_pretty(&value)?;
    out.push(b'\n');
    Ok(out)
}

/// Splits a stamped document into its payload bytes and provenance.
pub fn unstamp(bytes: &[u8]) -> Result<(Vec<u8>, Provenance), Error> {
    let mut value: Value = serde_json::from_slice(bytes)?;
    let prov = value
        .as_object_mut()
        .and_then(|o| o.remove("provenance"))
        .ok_or_else(|| Error::config("provenance", "document carries no provenance"))?;
    Ok((serde_json::to_vec(&value)?, serde_json::from_value(prov)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub stream: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub seed_source: SeedSource,
    pub seed_plan: Vec<SeedEntry>,
    /// File name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
    #[serde(default)]
    pub details: BTreeMap<String, Value>,
}

/// Collects files written by one command, then emits the manifest.
pub struct OutputDir {
    root: PathBuf,
    manifest: Manifest,
}

impl OutputDir {
    pub fn new(root: &Path, command: &str, provenance: &Provenance, seed_source: SeedSource) -> Self {
        OutputDir {
            root: root.to_path_buf(),
            manifest: Manifest {
                command: command.to_string(),
                config_hash: provenance.config_hash.clone(),
                seed: provenance.seed,
                seed_source,
                seed_plan: seed_plan(provenance.seed)
                    .into_iter()
                    .map(|(stream, seed)| SeedEntry {
                        stream: stream.to_string(),
                        seed,
                    })
                    .collect(),
                files: BTreeMap::new(),
                details: BTreeMap::new(),
            },
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Error> {
        write_atomic(&self.path(name), bytes)?;
        self.manifest.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn detail<T: Serialize>(&mut self, key: &str, value: &T) -> Result<(), Error> {
        self.manifest
            .details
            .insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Writes `<command>_manifest.json` and returns its path.
    pub fn finish(self) -> Result<PathBuf, Error> {
        let path = self.path(&format!("{}_manifest.json", self.manifest.command));
        write_json_atomic(&path, &self.manifest)?;
        Ok(path)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest, Error> {
    read_json(path)
}

/// Reads a required input, naming it in the error when missing.
pub fn read_input(path: &Path) -> Result<Vec<u8>, Error> {
    std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("missing input {}: {e}", path.display()),
        ))
    })
}
