//! Binary checkpoints of a trained retrieval state.
//!
//! Layout, little-endian:
//!
//! ```text
//! "C3CK" | version: u16 | kind: u8 (0) | text_dim: u32 | image_dim: u32 | out_dim: u32
//!        | step: u64 | log_gamma: f64
//!        | text weights (text_dim*out_dim f64) | text bias (out_dim f64)
//!        | image weights (image_dim*out_dim f64) | image bias (out_dim f64)
//! ```
//!
//! Parameters are stored as `f64`, so a round trip is exact. Loss
//! histories are not stored.

use std::path::{Path, PathBuf};

use c3_core::retrieval::{ProjectionHead, TrainState};
use c3_core::Matrix;
use thiserror::Error;

use crate::embedding_io::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"C3CK";
pub const CHECKPOINT_VERSION: u16 = 1;
const KIND_TRAIN_STATE: u8 = 0;
const HEADER_LEN: usize = 4 + 2 + 1 + 4 * 3 + 8 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: format error: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: corrupt checkpoint: {msg}")]
    Corrupt { path: PathBuf, msg: String },
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let t = &state.text_head;
    let i = &state.image_head;
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(KIND_TRAIN_STATE);
    for d in [t.in_dim(), i.in_dim(), t.out_dim()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.log_gamma.to_le_bytes());
    for v in t
        .weights
        .as_slice()
        .iter()
        .chain(&t.bias)
        .chain(i.weights.as_slice())
        .chain(&i.bias)
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<TrainState, CheckpointError> {
    let format = |msg: String| CheckpointError::Format {
        path: origin.to_path_buf(),
        msg,
    };
    let corrupt = |msg: String| CheckpointError::Corrupt {
        path: origin.to_path_buf(),
        msg,
    };
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format("bad magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("truncated header ({} bytes)", bytes.len())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(format(format!("unsupported version {version}")));
    }
    if bytes[6] != KIND_TRAIN_STATE {
        return Err(format(format!("unknown checkpoint kind {}", bytes[6])));
    }
    let (text_dim, image_dim, out_dim) = (u32_at(7), u32_at(11), u32_at(15));
    if text_dim == 0 || image_dim == 0 || out_dim == 0 {
        return Err(format("zero dimension in header".into()));
    }
    let step = u64::from_le_bytes(bytes[19..27].try_into().unwrap());
    let log_gamma = f64::from_le_bytes(bytes[27..35].try_into().unwrap());
    let n = (text_dim + 1 + image_dim + 1) * out_dim;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < n * 8 {
        return Err(corrupt(format!("payload has {} of {n} values", payload.len() / 8)));
    }
    if payload.len() > n * 8 {
        return Err(format(format!(
            "{} trailing bytes after {n} values",
            payload.len() - n * 8
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !log_gamma.is_finite() || values.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite parameter".into()));
    }
    let mut rest = values.as_slice();
    let mut take = |k: usize| {
        let (a, b) = rest.split_at(k);
        rest = b;
        a.to_vec()
    };
    let mut head = |in_dim: usize| -> Result<ProjectionHead, CheckpointError> {
        let weights = Matrix::new(in_dim, out_dim, take(in_dim * out_dim)).map_err(|e| corrupt(e.to_string()))?;
        Ok(ProjectionHead {
            weights,
            bias: take(out_dim),
        })
    };
    let text_head = head(text_dim)?;
    let image_head = head(image_dim)?;
    Ok(TrainState {
        text_head,
        image_head,
        log_gamma,
        step,
        loss_history: Vec::new(),
        epoch_losses: Vec::new(),
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<(), CheckpointError> {
    write_atomic(path, &encode_checkpoint(state)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use c3_core::embedding::{synth_embeddings, EmbeddingKind};
    use c3_core::retrieval::{train, TrainConfig};

    fn trained() -> TrainState {
        let t = synth_embeddings(1, 12, 6, EmbeddingKind::PooledText).unwrap();
        let i = synth_embeddings(2, 12, 5, EmbeddingKind::PooledImage).unwrap();
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 4,
            epochs: 1,
            ..TrainConfig::default()
        };
        train(t.payload(), i.payload(), &cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let s = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.c3ck");
        save_checkpoint(&path, &s).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.text_head, s.text_head);
        assert_eq!(back.image_head, s.image_head);
        assert_eq!(back.log_gamma.to_bits(), s.log_gamma.to_bits());
        assert_eq!(back.step, s.step);
        assert_eq!(encode_checkpoint(&back), std::fs::read(&path).unwrap());
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode_checkpoint(&trained());
        let p = Path::new("x");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad, p),
            Err(CheckpointError::Format { .. })
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 8], p),
            Err(CheckpointError::Corrupt { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            decode_checkpoint(&long, p),
            Err(CheckpointError::Format { .. })
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..10], p),
            Err(CheckpointError::Corrupt { .. })
        ));
    }
}
