//! Policy checkpoint files.
//!
//! Layout: the 8-byte magic `GRIDWALL`, a little-endian `u64` header length,
//! the JSON header, then a block of little-endian `f32` parameters. The
//! header lists every named array with its byte offset inside the block.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{LayerShape, Mlp};
use crate::policy::{ObsNormalizer, Policy, PolicyMeta};
use crate::track::TrackConfig;

pub const MAGIC: &[u8; 8] = b"GRIDWALL";
pub const FORMAT_VERSION: u32 = 1;
/// File extension of checkpoints in an agents directory.
pub const EXTENSION: &str = "gwc";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("track config hash mismatch: checkpoint {found}, expected {expected}")]
    HashMismatch { found: String, expected: String },
    #[error("checkpoint truncated: need {needed} bytes, file has {actual}")]
    Truncated { needed: u64, actual: u64 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the parameter block.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub created_unix: u64,
    pub meta: PolicyMeta,
    pub track_hash: String,
    pub track: TrackConfig,
    pub normalization: ObsNormalizer,
    pub delta_bound: f64,
    pub backbone_frozen: bool,
    pub backbone_layers: Vec<LayerShape>,
    pub interaction_layers: Vec<LayerShape>,
    pub tensors: Vec<TensorEntry>,
    /// Absolute byte offset of the parameter block.
    pub block_offset: u64,
    pub block_len: u64,
}

fn tensor_entries(prefix: &str, net: &Mlp, cursor: &mut u64) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    for (l, s) in net.shapes().iter().enumerate() {
        for (suffix, shape) in [("weight", vec![s.n_out, s.n_in]), ("bias", vec![s.n_out])] {
            let count: usize = shape.iter().product();
            let len = 4 * count as u64;
            out.push(TensorEntry { name: format!("{prefix}.{l}.{suffix}"), shape, offset: *cursor, len });
            *cursor += len;
        }
    }
    out
}

pub fn encode(policy: &Policy) -> Vec<u8> {
    let mut cursor = 0u64;
    let mut tensors = tensor_entries("backbone", &policy.backbone, &mut cursor);
    tensors.extend(tensor_entries("interaction", &policy.interaction, &mut cursor));
    let block_len = cursor;
    let created_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);

    // The block offset depends on the header length, which depends on the
    // offset's digits; iterate until stable.
    let mut header = CheckpointHeader {
        version: FORMAT_VERSION,
        created_unix,
        meta: policy.meta.clone(),
        track_hash: policy.track.hash(),
        track: policy.track.clone(),
        normalization: policy.normalizer.clone(),
        delta_bound: policy.delta_bound,
        backbone_frozen: policy.backbone_frozen,
        backbone_layers: policy.backbone.shapes().to_vec(),
        interaction_layers: policy.interaction.shapes().to_vec(),
        tensors,
        block_offset: 0,
        block_len,
    };
    let mut json = serde_json::to_vec(&header).expect("header serializes");
    loop {
        let offset = (MAGIC.len() + 8 + json.len()) as u64;
        if offset == header.block_offset {
            break;
        }
        header.block_offset = offset;
        json = serde_json::to_vec(&header).expect("header serializes");
    }

    let mut out = Vec::with_capacity(header.block_offset as usize + block_len as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in policy.backbone.params().iter().chain(policy.interaction.params()) {
        out.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    out
}

/// Reads only the header.
pub fn decode_header(bytes: &[u8]) -> Result<CheckpointHeader, CheckpointError> {
    let actual = bytes.len() as u64;
    if bytes.len() < MAGIC.len() {
        return Err(CheckpointError::Truncated { needed: MAGIC.len() as u64, actual });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated { needed: 16, actual });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16u64.saturating_add(header_len);
    if header_end > actual {
        return Err(CheckpointError::Truncated { needed: header_end, actual });
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end as usize])
        .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: header.version, expected: FORMAT_VERSION });
    }
    Ok(header)
}

pub fn decode(bytes: &[u8], expected_track_hash: Option<&str>) -> Result<Policy, CheckpointError> {
    let header = decode_header(bytes)?;
    if header.track_hash != header.track.hash() {
        return Err(CheckpointError::Malformed("embedded track config does not match its hash".into()));
    }
    if let Some(expected) = expected_track_hash {
        if header.track_hash != expected {
            return Err(CheckpointError::HashMismatch {
                found: header.track_hash,
                expected: expected.to_string(),
            });
        }
    }
    let needed = header.block_offset.saturating_add(header.block_len);
    if needed > bytes.len() as u64 {
        return Err(CheckpointError::Truncated { needed, actual: bytes.len() as u64 });
    }
    let block = &bytes[header.block_offset as usize..needed as usize];

    let read = |prefix: &str, layers: &[LayerShape]| -> Result<Mlp, CheckpointError> {
        let mut params = Vec::new();
        for l in 0..layers.len() {
            for suffix in ["weight", "bias"] {
                let name = format!("{prefix}.{l}.{suffix}");
                let entry = header
                    .tensors
                    .iter()
                    .find(|t| t.name == name)
                    .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {name}")))?;
                let end = entry.offset.saturating_add(entry.len);
                if end > block.len() as u64 || entry.len % 4 != 0 {
                    return Err(CheckpointError::Malformed(format!("tensor {name} out of bounds")));
                }
                let raw = &block[entry.offset as usize..end as usize];
                params.extend(
                    raw.chunks_exact(4)
                        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))),
                );
            }
        }
        Mlp::from_parts(layers.to_vec(), params)
            .ok_or_else(|| CheckpointError::Malformed(format!("{prefix} shapes inconsistent")))
    };

    let backbone = read("backbone", &header.backbone_layers)?;
    let interaction = read("interaction", &header.interaction_layers)?;
    Ok(Policy {
        backbone,
        interaction,
        normalizer: header.normalization,
        delta_bound: header.delta_bound,
        backbone_frozen: header.backbone_frozen,
        track: header.track,
        meta: header.meta,
    })
}

pub fn save_checkpoint(policy: &Policy, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, encode(policy))?;
    Ok(())
}

/// Checkpoint files in `dir` as `(agent id, path)`, where the id is the file
/// stem. Sorted by id.
pub fn list_checkpoints(dir: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>, CheckpointError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(EXTENSION) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Loads and checks the checkpoint against `track`.
pub fn load_checkpoint(path: impl AsRef<Path>, track: &TrackConfig) -> Result<Policy, CheckpointError> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, Some(&track.hash()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EgoObservation, OpponentObservation, EGO_OBS_DIM};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trained_like_policy() -> Policy {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = Policy::new(&TrackConfig::default(), &mut rng);
        for v in p.interaction.params_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
        p.quantize();
        p.meta.name = "alpha".into();
        p.meta.elo = Some(1016.0);
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = trained_like_policy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alpha.ckpt");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path, &TrackConfig::default()).unwrap();
        assert_eq!(p, q);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let mut o = [0.0; EGO_OBS_DIM];
            for v in &mut o {
                *v = rng.gen_range(-10.0..900.0);
            }
            let o = EgoObservation(o);
            let r = OpponentObservation([rng.gen_range(0.0..30.0), 1.0, 0.0, rng.gen_range(-9.0..9.0)]);
            let a = p.act_parts(&o, &r);
            let b = q.act_parts(&o, &r);
            for i in 0..3 {
                assert_eq!(a.a_nom[i].to_bits(), b.a_nom[i].to_bits());
                assert_eq!(a.delta[i].to_bits(), b.delta[i].to_bits());
            }
        }
    }

    #[test]
    fn header_offsets_are_consistent() {
        let bytes = encode(&trained_like_policy());
        let h = decode_header(&bytes).unwrap();
        assert_eq!(h.block_offset + h.block_len, bytes.len() as u64);
        let total: u64 = h.tensors.iter().map(|t| t.len).sum();
        assert_eq!(total, h.block_len);
        assert_eq!(h.tensors[0].name, "backbone.0.weight");
        assert_eq!(h.tensors[0].shape, vec![64, 10]);
    }

    #[test]
    fn hash_mismatch_refused() {
        let p = trained_like_policy();
        let bytes = encode(&p);
        let other = TrackConfig { t0: 80.0, ..TrackConfig::default() };
        let err = decode(&bytes, Some(&other.hash())).unwrap_err();
        assert!(matches!(err, CheckpointError::HashMismatch { .. }));
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode(&trained_like_policy());
        let err = decode(&bytes[..bytes.len() - 3], None).unwrap_err();
        assert!(matches!(err, CheckpointError::Truncated { .. }));
        // Corrupted length field pointing past the end of the file.
        let mut bad = bytes.clone();
        bad[8..16].copy_from_slice(&(u64::MAX / 2).to_le_bytes());
        assert!(matches!(decode(&bad, None).unwrap_err(), CheckpointError::Truncated { .. }));
        assert!(matches!(decode(&bytes[..12], None).unwrap_err(), CheckpointError::Truncated { .. }));
    }

    #[test]
    fn version_and_magic_checked() {
        let bytes = encode(&trained_like_policy());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, None).unwrap_err(), CheckpointError::BadMagic));

        let mut h = decode_header(&bytes).unwrap();
        h.version = 99;
        let json = serde_json::to_vec(&h).unwrap();
        let mut v = MAGIC.to_vec();
        v.extend_from_slice(&(json.len() as u64).to_le_bytes());
        v.extend_from_slice(&json);
        assert!(matches!(decode(&v, None).unwrap_err(), CheckpointError::Version { found: 99, .. }));
    }
}
