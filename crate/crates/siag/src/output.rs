//! Result persistence: gap-curve CSV, JSON documents, content hashes, and
//! atomic file writes.
//!
//! Hashes are SHA-256 over the exact serialized bytes, so two runs agree on
//! a hash exactly when they agree bit for bit on the serialized content.
//! Writes go to a temporary sibling first and are renamed into place, so a
//! crash never leaves a half-written artifact under the final name.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::theory::GapEstimate;
use crate::{Result, SiagError};

/// Hex-encoded SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Content hash of any serializable value via its canonical JSON bytes.
/// Struct fields serialize in declaration order, so the bytes — and hence
/// the hash — are stable across runs and platforms.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

/// Serializes a gap curve as CSV with header `t,mean,stderr,trials`, with
/// floats in shortest round-tripping form (full precision).
pub fn curve_csv_bytes(curve: &[GapEstimate]) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["t", "mean", "stderr", "trials"])?;
    for est in curve {
        wtr.write_record([
            est.t.to_string(),
            est.mean.to_string(),
            est.stderr.to_string(),
            est.trials.to_string(),
        ])?;
    }
    wtr.into_inner().map_err(|e| SiagError::Io(e.into_error()))
}

/// Reads a gap curve written by [`curve_csv_bytes`].
pub fn read_curve_csv(path: &Path) -> Result<Vec<GapEstimate>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut curve = Vec::new();
    for row in rdr.deserialize() {
        curve.push(row?);
    }
    Ok(curve)
}

/// Writes bytes to `path` via a temporary sibling plus rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path.file_name().map(|n| n.to_os_string()).ok_or_else(|| {
        SiagError::InvalidConfig(format!("cannot write to {}: no file name", path.display()))
    })?;
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes a value as pretty-printed JSON, atomically.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Reads a JSON document written by [`write_json_atomic`].
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}
