//! Embedding files and dataset manifests.
//!
//! Embedding file layout, little-endian:
//!
//! ```text
//! "C3EM" | version: u16 | kind: u8 | count: u32 | dim: u32 | count*dim f32, row-major
//! ```
//!
//! Values are widened exactly to `f64` on load and rounded to the nearest
//! `f32` on save, so `load(save(m)) == m` whenever every entry of `m` is
//! representable as `f32`, and `save(load(f))` reproduces `f` byte for byte.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use c3_core::embedding::{EmbeddingError, EmbeddingKind, EmbeddingMatrix};
use c3_core::Matrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"C3EM";
pub const EMBEDDING_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4;

#[derive(Debug, Error)]
pub enum EmbeddingIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: format error: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: corrupt file: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Invalid { path: PathBuf, source: EmbeddingError },
}

/// Serializes an embedding matrix to bytes.
pub fn encode_embeddings(m: &EmbeddingMatrix) -> Result<Vec<u8>, String> {
    let count = u32::try_from(m.count()).map_err(|_| "count exceeds u32".to_string())?;
    let dim = u32::try_from(m.dim()).map_err(|_| "dim exceeds u32".to_string())?;
    let mut out = Vec::with_capacity(HEADER_LEN + m.count() * m.dim() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.push(m.kind().code());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for &v in m.payload().as_slice() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(format!("value {v} does not fit in f32"));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Parses bytes produced by [`encode_embeddings`]. `origin` is used in
/// error messages and as the source tag.
pub fn decode_embeddings(bytes: &[u8], origin: &Path) -> Result<EmbeddingMatrix, EmbeddingIoError> {
    let format = |msg: String| EmbeddingIoError::Format {
        path: origin.to_path_buf(),
        msg,
    };
    let corrupt = |msg: String| EmbeddingIoError::Corrupt {
        path: origin.to_path_buf(),
        msg,
    };
    if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(format("bad magic, expected \"C3EM\"".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!(
            "header truncated at {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EMBEDDING_VERSION {
        return Err(format(format!("unsupported version {version}")));
    }
    let kind = EmbeddingKind::from_code(bytes[6]).ok_or_else(|| format(format!("unknown kind code {}", bytes[6])))?;
    let count = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(format("dim is zero".into()));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format(format!("header shape {count}x{dim} overflows")))?;
    if payload.len() < expected {
        return Err(corrupt(format!(
            "header says {count}x{dim} = {} values but only {} bytes ({} values) present",
            count * dim,
            payload.len(),
            payload.len() / 4
        )));
    }
    if payload.len() > expected {
        return Err(format(format!(
            "header says {count}x{dim} but {} trailing bytes follow the payload",
            payload.len() - expected
        )));
    }
    let mut data = Vec::with_capacity(count * dim);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(corrupt(format!("non-finite value at index {i}")));
        }
        data.push(f64::from(v));
    }
    let matrix = Matrix::new(count, dim, data).map_err(|e| corrupt(e.to_string()))?;
    EmbeddingMatrix::new(matrix, kind, origin.display().to_string()).map_err(|source| EmbeddingIoError::Invalid {
        path: origin.to_path_buf(),
        source,
    })
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix, EmbeddingIoError> {
    let bytes = fs::read(path).map_err(|source| EmbeddingIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_embeddings(&bytes, path)
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn save_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<(), EmbeddingIoError> {
    let bytes = encode_embeddings(m).map_err(|msg| EmbeddingIoError::Format {
        path: path.to_path_buf(),
        msg,
    })?;
    write_atomic(path, &bytes).map_err(|source| EmbeddingIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Atomic replace: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// One image-text pair of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image_ref: String,
    pub caption: String,
    pub image_embedding_ref: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub attribute_embedding_ref: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Validation { path: PathBuf, line: usize, msg: String },
}

#[derive(Deserialize)]
struct RawSample {
    id: Option<String>,
    image_ref: Option<String>,
    caption: Option<String>,
    image_embedding_ref: Option<PathBuf>,
    attribute_embedding_ref: Option<PathBuf>,
}

/// Reads a JSON-lines manifest. Blank lines are skipped; relative
/// embedding paths are resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, path, base)
}

pub fn parse_manifest(text: &str, path: &Path, base: &Path) -> Result<Vec<Sample>, ManifestError> {
    let invalid = |line: usize, msg: String| ManifestError::Validation {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut samples = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(raw_line).map_err(|e| invalid(line, format!("invalid JSON: {e}")))?;
        let require = |v: Option<String>, field: &str| {
            v.ok_or_else(|| invalid(line, format!("missing required field '{field}'")))
        };
        let id = require(raw.id, "id")?;
        if id.trim().is_empty() {
            return Err(invalid(line, "empty id".into()));
        }
        let image_ref = require(raw.image_ref, "image_ref")?;
        let caption = require(raw.caption, "caption")?;
        if caption.trim().is_empty() {
            return Err(invalid(line, format!("sample '{id}' has an empty caption")));
        }
        let image_embedding_ref = raw
            .image_embedding_ref
            .ok_or_else(|| invalid(line, "missing required field 'image_embedding_ref'".into()))?;
        if let Some(first) = seen.get(&id) {
            return Err(invalid(
                line,
                format!("duplicate id '{id}' (first on line {first}, again on line {line})"),
            ));
        }
        seen.insert(id.clone(), line);
        samples.push(Sample {
            id,
            image_ref,
            caption,
            image_embedding_ref: base.join(image_embedding_ref),
            attribute_embedding_ref: raw.attribute_embedding_ref.map(|p| base.join(p)),
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use c3_core::embedding::synth_embeddings;

    fn f32_exact(m: EmbeddingMatrix) -> EmbeddingMatrix {
        let payload = m.payload();
        let data = payload.as_slice().iter().map(|v| f64::from(*v as f32)).collect();
        EmbeddingMatrix::new(Matrix::new(payload.rows(), payload.cols(), data).unwrap(), m.kind(), "").unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.c3em");
        let m = f32_exact(synth_embeddings(1, 4, 8, EmbeddingKind::VisualRegions).unwrap());
        save_embeddings(&path, &m).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back.payload(), m.payload());
        assert_eq!(back.kind(), m.kind());
        let bytes = fs::read(&path).unwrap();
        assert_eq!(encode_embeddings(&back).unwrap(), bytes);
    }

    #[test]
    fn pooled_survives_f32_rounding() {
        let m = synth_embeddings(2, 6, 64, EmbeddingKind::PooledText).unwrap();
        let bytes = encode_embeddings(&m).unwrap();
        let back = decode_embeddings(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.kind(), EmbeddingKind::PooledText);
    }

    #[test]
    fn wrong_magic() {
        let m = synth_embeddings(1, 2, 2, EmbeddingKind::VisualRegions).unwrap();
        let mut bytes = encode_embeddings(&m).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_embeddings(&bytes, Path::new("x")),
            Err(EmbeddingIoError::Format { .. })
        ));
        assert!(matches!(
            decode_embeddings(b"C3", Path::new("x")),
            Err(EmbeddingIoError::Format { .. })
        ));
    }

    #[test]
    fn short_payload_is_corrupt() {
        let m = synth_embeddings(1, 3, 5, EmbeddingKind::VisualRegions).unwrap();
        let bytes = encode_embeddings(&m).unwrap();
        let short = &bytes[..bytes.len() - 4];
        let err = decode_embeddings(short, Path::new("x")).unwrap_err();
        assert!(matches!(err, EmbeddingIoError::Corrupt { .. }));
        assert!(err.to_string().contains("14 values"), "{err}");
        assert!(matches!(
            decode_embeddings(&bytes[..9], Path::new("x")),
            Err(EmbeddingIoError::Corrupt { .. })
        ));
    }

    #[test]
    fn trailing_bytes_are_format_error() {
        let m = synth_embeddings(1, 3, 5, EmbeddingKind::VisualRegions).unwrap();
        let mut bytes = encode_embeddings(&m).unwrap();
        bytes.extend_from_slice(&0f32.to_le_bytes());
        assert!(matches!(
            decode_embeddings(&bytes, Path::new("x")),
            Err(EmbeddingIoError::Format { .. })
        ));
    }

    #[test]
    fn non_finite_payload_is_corrupt() {
        let m = synth_embeddings(1, 1, 2, EmbeddingKind::VisualRegions).unwrap();
        let mut bytes = encode_embeddings(&m).unwrap();
        bytes[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_embeddings(&bytes, Path::new("x")),
            Err(EmbeddingIoError::Corrupt { .. })
        ));
    }

    #[test]
    fn unknown_kind_and_version() {
        let m = synth_embeddings(1, 1, 2, EmbeddingKind::VisualRegions).unwrap();
        let mut bytes = encode_embeddings(&m).unwrap();
        bytes[6] = 7;
        assert!(matches!(
            decode_embeddings(&bytes, Path::new("x")),
            Err(EmbeddingIoError::Format { .. })
        ));
        let mut bytes = encode_embeddings(&m).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_embeddings(&bytes, Path::new("x")),
            Err(EmbeddingIoError::Format { .. })
        ));
    }

    fn line(id: &str, caption: &str) -> String {
        format!(
            r#"{{"id":"{id}","image_ref":"img/{id}.jpg","caption":"{caption}","image_embedding_ref":"{id}.v.c3em"}}"#
        )
    }

    #[test]
    fn manifest_order_and_paths() {
        let text = format!("{}\n\n{}\n", line("a", "first"), line("b", "第二"));
        let got = parse_manifest(&text, Path::new("m.jsonl"), Path::new("/data")).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].id, "a");
        assert_eq!(got[1].caption, "第二");
        assert_eq!(got[0].image_embedding_ref, PathBuf::from("/data/a.v.c3em"));
        assert_eq!(got[0].attribute_embedding_ref, None);
    }

    #[test]
    fn manifest_duplicate_cites_both_lines() {
        let lines = [
            line("a", "x"),
            line("b", "x"),
            line("dup", "x"),
            line("c", "x"),
            line("d", "x"),
            line("e", "x"),
            line("dup", "y"),
        ];
        let err = parse_manifest(&lines.join("\n"), Path::new("m"), Path::new("")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("line 7"), "{msg}");
        assert!(msg.contains("dup"));
    }

    #[test]
    fn manifest_rejects_empty_caption_and_missing_fields() {
        let err = parse_manifest(&line("a", "   "), Path::new("m"), Path::new("")).unwrap_err();
        assert!(matches!(err, ManifestError::Validation { line: 1, .. }));
        let missing = r#"{"id":"a","caption":"c","image_embedding_ref":"x"}"#;
        let text = format!("{}\n{missing}", line("z", "ok"));
        let err = parse_manifest(&text, Path::new("m"), Path::new("")).unwrap_err();
        match err {
            ManifestError::Validation { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("image_ref"));
            }
            other => panic!("{other}"),
        }
    }
}
