//! Binary tensor container shared by encoder checkpoints and index dumps.
//!
//! Layout: 8-byte magic, u32 format version, u32 header length (all
//! little-endian), a JSON header of that length, then every tensor as raw
//! little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderConfig, EncoderError, EncoderParams, Result};

const MAGIC: &[u8; 8] = b"DFRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorSpec>,
    pub payload_sha256: String,
}

pub fn write_container(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(TensorSpec, &[f32])],
) -> Result<()> {
    let mut payload = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 4).sum());
    for (spec, data) in tensors {
        debug_assert_eq!(spec.len(), data.len());
        for x in *data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = ContainerHeader {
        kind: kind.to_string(),
        meta,
        tensors: tensors.iter().map(|(s, _)| s.clone()).collect(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| EncoderError::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(ContainerHeader, Vec<Vec<f32>>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < PREFIX_LEN {
        return Err(EncoderError::Corrupt(format!(
            "file is {} bytes, shorter than the {PREFIX_LEN}-byte prefix",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(EncoderError::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(EncoderError::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header_end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| EncoderError::Corrupt("truncated header".into()))?;
    let header: ContainerHeader = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
        .map_err(|e| EncoderError::Corrupt(format!("header: {e}")))?;
    let payload = &bytes[header_end..];
    let expected: usize = header.tensors.iter().map(|t| t.len() * 4).sum();
    if payload.len() != expected {
        return Err(EncoderError::Corrupt(format!(
            "payload is {} bytes, header declares {expected}",
            payload.len()
        )));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(EncoderError::Corrupt("payload checksum mismatch".into()));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 0;
    for spec in &header.tensors {
        let n = spec.len();
        let data = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 4 * n;
        tensors.push(data);
    }
    Ok((header, tensors))
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    config: EncoderConfig,
    seed: u64,
    version: u64,
}

pub fn save_checkpoint(params: &EncoderParams, path: impl AsRef<Path>) -> Result<()> {
    let meta = EncoderMeta {
        config: *params.config(),
        seed: params.seed(),
        version: params.version(),
    };
    let specs = params.config().shapes();
    let tensors: Vec<(TensorSpec, &[f32])> = specs
        .iter()
        .zip(params.tensors())
        .map(|((name, shape), t)| {
            (
                TensorSpec {
                    name: name.to_string(),
                    shape: shape.clone(),
                },
                t.as_slice(),
            )
        })
        .collect();
    write_container(
        path.as_ref(),
        "encoder",
        serde_json::to_value(meta).expect("meta serializes"),
        &tensors,
    )
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderParams> {
    let (header, tensors) = read_container(path.as_ref())?;
    if header.kind != "encoder" {
        return Err(EncoderError::Corrupt(format!(
            "expected an encoder checkpoint, found kind {:?}",
            header.kind
        )));
    }
    let meta: EncoderMeta = serde_json::from_value(header.meta)
        .map_err(|e| EncoderError::Corrupt(format!("meta: {e}")))?;
    let specs = meta.config.shapes();
    if header.tensors.len() != specs.len() {
        return Err(EncoderError::Corrupt(format!(
            "expected {} tensors, found {}",
            specs.len(),
            header.tensors.len()
        )));
    }
    for ((name, shape), found) in specs.iter().zip(&header.tensors) {
        if found.name != *name || found.shape != *shape {
            return Err(EncoderError::Corrupt(format!(
                "tensor {} {:?} disagrees with config ({name} {shape:?})",
                found.name, found.shape
            )));
        }
    }
    let tensors: [Vec<f32>; 5] = tensors
        .try_into()
        .map_err(|_| EncoderError::Corrupt("tensor count".into()))?;
    EncoderParams::from_parts(meta.config, tensors, meta.version, meta.seed)
}

/// Loads a checkpoint and checks that it was written under `expected`.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &EncoderConfig,
) -> Result<EncoderParams> {
    let params = load_checkpoint(path)?;
    if params.config() != expected {
        let found = params.config();
        return Err(EncoderError::ShapeMismatch(format!(
            "checkpoint has vocab {} / dims ({}, {}, {}), configuration expects vocab {} / dims ({}, {}, {})",
            found.tokenizer.hash_vocab_size,
            found.embed_dim,
            found.hidden_dim,
            found.output_dim,
            expected.tokenizer.hash_vocab_size,
            expected.embed_dim,
            expected.hidden_dim,
            expected.output_dim,
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::tiny_config;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let p = EncoderParams::init(42, tiny_config(32, 4, 6, 3)).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            let bits_a: Vec<u32> = a.iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u32> = b.iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(p, q);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_checkpoint(&EncoderParams::init(1, tiny_config(8, 2, 2, 2)).unwrap(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(EncoderError::Corrupt(_))));
        fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(EncoderError::Corrupt(_))));
    }

    #[test]
    fn flipped_payload_byte_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_checkpoint(&EncoderParams::init(1, tiny_config(8, 2, 2, 2)).unwrap(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(EncoderError::Corrupt(_))));
    }

    #[test]
    fn version_mismatch_reports_both() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        save_checkpoint(&EncoderParams::init(1, tiny_config(8, 2, 2, 2)).unwrap(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, EncoderError::VersionMismatch { expected: 1, found: 7 }));
        assert!(err.to_string().contains('7') && err.to_string().contains('1'));
    }

    #[test]
    fn config_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let d128 = tiny_config(16, 4, 4, 128);
        save_checkpoint(&EncoderParams::init(1, d128).unwrap(), &path).unwrap();
        let d64 = tiny_config(16, 4, 4, 64);
        assert!(matches!(
            load_checkpoint_expecting(&path, &d64),
            Err(EncoderError::ShapeMismatch(_))
        ));
        assert!(load_checkpoint_expecting(&path, &d128).is_ok());
    }
}
