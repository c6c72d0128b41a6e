//! File formats and atomic writes.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "DETCALCK"
//! header_len   u32
//! header       header_len bytes of JSON: format_version, architecture,
//!              param_count
//! payload      param_count × f64 (IEEE-754 bits, little-endian), in the
//!              flat parameter order of `ModelParameters`
//! checksum     32 bytes  SHA-256 of everything before it
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CheckpointError;
use crate::network::{Architecture, ModelParameters};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DETCALCK";
pub const CHECKPOINT_VERSION: u64 = 1;
const CHECKSUM_LEN: usize = 32;

/// Writes `bytes` to a temporary file beside `path`, then renames it over
/// `path`.
pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    write_bytes_atomic(path, text.as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u64,
    architecture: Architecture,
    param_count: usize,
}

pub fn encode_checkpoint(params: &ModelParameters) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        architecture: params.architecture().clone(),
        param_count: params.len(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + 8 * params.len() + CHECKSUM_LEN);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn need(bytes: &[u8], needed: usize) -> Result<(), CheckpointError> {
    if bytes.len() < needed {
        Err(CheckpointError::Truncated {
            needed,
            found: bytes.len(),
        })
    } else {
        Ok(())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParameters, CheckpointError> {
    need(bytes, CHECKPOINT_MAGIC.len())?;
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    need(bytes, 12)?;
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .ok_or(CheckpointError::Header("header length overflows".into()))?;
    need(bytes, header_end)?;
    let header_bytes = &bytes[12..header_end];

    // The version is read before anything else in the header is trusted, so
    // files from newer writers fail with a version error.
    let raw: serde_json::Value =
        serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::Header("missing format_version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let header: CheckpointHeader = serde_json::from_value(raw).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let payload_len = header
        .param_count
        .checked_mul(8)
        .ok_or(CheckpointError::Header("parameter count overflows".into()))?;
    let total = header_end
        .checked_add(payload_len)
        .and_then(|n| n.checked_add(CHECKSUM_LEN))
        .ok_or(CheckpointError::Header("file length overflows".into()))?;
    need(bytes, total)?;
    if bytes.len() > total {
        return Err(CheckpointError::Header(format!(
            "{} trailing bytes after checksum",
            bytes.len() - total
        )));
    }
    let body_end = total - CHECKSUM_LEN;
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(CheckpointError::Checksum);
    }
    header
        .architecture
        .validate()
        .map_err(|e| CheckpointError::Shape(e.to_string()))?;
    if header.architecture.param_count() != header.param_count {
        return Err(CheckpointError::Shape(format!(
            "architecture has {} parameters, header says {}",
            header.architecture.param_count(),
            header.param_count
        )));
    }
    let values = bytes[header_end..body_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ModelParameters::from_values(header.architecture, values).map_err(|e| CheckpointError::Shape(e.to_string()))
}

pub fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<(), CheckpointError> {
    write_bytes_atomic(path, &encode_checkpoint(params)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{PoolMode, Variant};

    fn params(seed: u64) -> ModelParameters {
        let arch = Architecture {
            variant: Variant::SetCnn,
            input_width: 5,
            max_rows: 4,
            feature_widths: vec![3, 2],
            head_hidden: vec![],
            embedding_dim: 1,
            num_classes: 3,
            pool: PoolMode::Literal,
        };
        ModelParameters::init(arch, seed).unwrap()
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = params(4);
        save_checkpoint(&p, &path).unwrap();
        assert!(load_checkpoint(&path).unwrap().bit_eq(&p));
        // overwrite in place
        let q = params(5);
        save_checkpoint(&q, &path).unwrap();
        assert!(load_checkpoint(&path).unwrap().bit_eq(&q));
    }

    #[test]
    fn payload_flip_is_checksum_error() {
        let mut bytes = encode_checkpoint(&params(1));
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        bytes[12 + header_len + 3] ^= 0x10;
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::Checksum)));
    }

    #[test]
    fn future_version_is_version_error() {
        let bytes = encode_checkpoint(&params(1));
        let text = String::from_utf8_lossy(&bytes).to_string();
        assert!(text.contains("\"format_version\":1"));
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + header_len]).unwrap();
        let newer = header.replace("\"format_version\":1", "\"format_version\":7");
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&(newer.len() as u32).to_le_bytes());
        out.extend_from_slice(newer.as_bytes());
        out.extend_from_slice(&bytes[12 + header_len..]);
        assert!(matches!(
            decode_checkpoint(&out),
            Err(CheckpointError::Version { found: 7, supported: 1 })
        ));
    }

    #[test]
    fn truncation_and_magic() {
        let bytes = encode_checkpoint(&params(1));
        for cut in [0, 5, 11, 20, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(CheckpointError::Truncated { .. })),
                "cut at {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::BadMagic)));
        let missing = std::path::Path::new("/nonexistent/dir/m.ckpt");
        assert!(matches!(load_checkpoint(missing), Err(CheckpointError::Io { .. })));
    }
}
