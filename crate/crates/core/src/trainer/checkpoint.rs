//! Single-file checkpoint container.
//!
//! ```text
//! magic "CXRCKPT1" | header length (u32 LE) | JSON header | weights blob
//! ```
//!
//! The header carries `schema_version`, `kind`, the blob length and its
//! SHA-256, plus kind-specific metadata. Writes go to a temporary file in the
//! target directory which is then renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;

const MAGIC: &[u8; 8] = b"CXRCKPT1";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Envelope<M> {
    schema_version: u32,
    kind: String,
    blob_len: usize,
    blob_sha256: String,
    meta: M,
}

pub fn encode<M: Serialize>(kind: &str, meta: &M, blob: &[u8]) -> Vec<u8> {
    let envelope = Envelope {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kind: kind.to_string(),
        blob_len: blob.len(),
        blob_sha256: hex::encode(Sha256::digest(blob)),
        meta,
    };
    let header = serde_json::to_vec(&envelope).expect("metadata serializes");
    let mut out = Vec::with_capacity(12 + header.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(blob);
    out
}

pub fn decode<M: DeserializeOwned>(kind: &str, bytes: &[u8]) -> Result<(M, Vec<u8>), TrainError> {
    let corrupt = |m: &str| TrainError::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header = bytes.get(12..12 + len).ok_or_else(|| corrupt("truncated header"))?;
    let envelope: Envelope<M> =
        serde_json::from_slice(header).map_err(|e| TrainError::Checkpoint(format!("header: {e}")))?;
    if envelope.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported schema_version {}",
            envelope.schema_version
        )));
    }
    if envelope.kind != kind {
        return Err(TrainError::Checkpoint(format!(
            "expected a `{kind}` checkpoint, found `{}`",
            envelope.kind
        )));
    }
    let blob = &bytes[12 + len..];
    if blob.len() != envelope.blob_len || hex::encode(Sha256::digest(blob)) != envelope.blob_sha256 {
        return Err(corrupt("weights blob length or digest mismatch"));
    }
    Ok((envelope.meta, blob.to_vec()))
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let io = |e| TrainError::Io(path.display().to_string(), e);
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

pub fn read(path: &Path) -> Result<Vec<u8>, TrainError> {
    fs::read(path).map_err(|e| TrainError::Io(path.display().to_string(), e))
}

pub fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f32s(bytes: &[u8]) -> Result<Vec<f32>, TrainError> {
    if bytes.len() % 4 != 0 {
        return Err(TrainError::Checkpoint("blob is not a whole number of f32".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>, TrainError> {
    if bytes.len() % 8 != 0 {
        return Err(TrainError::Checkpoint("blob is not a whole number of f64".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_and_corruption() {
        let blob = f32s_to_bytes(&[1.0, -2.5, 3.25]);
        let bytes = encode("encoder", &serde_json::json!({"d": 3}), &blob);
        let (meta, back): (serde_json::Value, _) = decode("encoder", &bytes).unwrap();
        assert_eq!(meta["d"], 3);
        assert_eq!(bytes_to_f32s(&back).unwrap(), vec![1.0, -2.5, 3.25]);

        assert!(decode::<serde_json::Value>("head", &bytes).is_err());
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(decode::<serde_json::Value>("encoder", &flipped).is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
