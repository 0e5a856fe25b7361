//! Serialization helpers: decimal-string float arrays, content hashing,
//! atomic file writes, and CSV output with a provenance comment line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Serde adapter writing `Vec<f64>` as an array of shortest round-trip
/// decimal strings, so a reload reproduces every value bit-for-bit.
pub mod decimal_vec {
    use super::*;

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let strings: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
        strings.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let strings = Vec::<String>::deserialize(d)?;
        strings
            .iter()
            .map(|s| s.parse::<f64>().map_err(serde::de::Error::custom))
            .collect()
    }
}

/// Same as [`decimal_vec`] for a single scalar.
pub mod decimal {
    use super::*;

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        format!("{value:?}").serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        s.parse::<f64>().map_err(serde::de::Error::custom)
    }
}

/// Hex SHA-256 of a byte stream.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a value's canonical JSON form. `serde_json` object maps are
/// key-sorted, so two structurally equal values always hash equally.
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    let bytes = serde_json::to_vec(&canonical)?;
    Ok(sha256_hex(&bytes)[..16].to_string())
}

/// Write-to-temp then rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path
        .file_name()
        .ok_or_else(|| Error::config("path", format!("{} has no file name", path.display())))?
        .to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Provenance stamped on every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// Renders rows into CSV bytes, prefixed with a `#` provenance comment when
/// one is supplied. Readers should enable `#` comments.
pub fn csv_bytes<R: Serialize>(rows: &[R], provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    if let Some(p) = provenance {
        writeln!(out, "# config_hash={} seed={}", p.config_hash, p.seed)?;
    }
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// CSV bytes for rows whose column count is only known at runtime.
pub fn csv_records<H: AsRef<[u8]>>(
    header: &[H],
    rows: &[Vec<String>],
    provenance: Option<&Provenance>,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    if let Some(p) = provenance {
        writeln!(out, "# config_hash={} seed={}", p.config_hash, p.seed)?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}
