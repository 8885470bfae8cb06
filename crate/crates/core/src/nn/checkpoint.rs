//! Checkpoint format: one compact JSON header line, then the parameter
//! vector as little-endian f64 bytes. The header carries enough metadata to
//! validate the blob before touching it.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

fn io_with_path(path: &Path, verb: &str, e: std::io::Error) -> CoreError {
    CoreError::Io(std::io::Error::new(e.kind(), format!("{verb} {}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// What the parameters belong to, e.g. "policy" or "critic".
    pub kind: String,
    /// Free-form component metadata (specs, dims, head config).
    pub meta: serde_json::Value,
    pub n_params: usize,
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &[f64]) -> Result<()> {
    if header.n_params != params.len() {
        return Err(CoreError::Shape(format!(
            "header says {} parameters, got {}",
            header.n_params,
            params.len()
        )));
    }
    let mut buf = serde_json::to_vec(header)?;
    buf.push(b'\n');
    buf.reserve(params.len() * 8);
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| io_with_path(path, "create", e))?;
    f.write_all(&buf).map_err(|e| io_with_path(path, "write", e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_with_path(path, "read", e))?;
    let newline = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| CoreError::Config("checkpoint missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| CoreError::Config(format!("bad checkpoint header: {e}")))?;
    let blob = &bytes[newline + 1..];
    if blob.len() != header.n_params * 8 {
        return Err(CoreError::Shape(format!(
            "checkpoint blob is {} bytes, header promises {}",
            blob.len(),
            header.n_params * 8
        )));
    }
    let mut params = Vec::with_capacity(header.n_params);
    for chunk in blob.chunks_exact(8) {
        params.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
    }
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let params = vec![0.1, -2.5e300, f64::MIN_POSITIVE, 0.0, -0.0];
        let header = CheckpointHeader {
            kind: "policy".into(),
            meta: serde_json::json!({"obs_dim": 3, "widths": [64, 64]}),
            n_params: params.len(),
        };
        save_checkpoint(&path, &header, &params).unwrap();
        let (h, p) = load_checkpoint(&path).unwrap();
        assert_eq!(h.kind, "policy");
        assert_eq!(h.meta["widths"][1], 64);
        assert_eq!(p.len(), params.len());
        for (a, b) in p.iter().zip(&params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_truncated_blob_and_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let header =
            CheckpointHeader { kind: "critic".into(), meta: serde_json::Value::Null, n_params: 3 };
        assert!(save_checkpoint(&path, &header, &[1.0]).is_err());
        save_checkpoint(&path, &header, &[1.0, 2.0, 3.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
