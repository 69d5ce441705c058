//! Embedding matrices exchanged with the external encoders.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{norm, LinalgError, Matrix};
use crate::rng::DetRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    VisualRegions,
    AttributeTexts,
    PooledText,
    PooledImage,
}

impl EmbeddingKind {
    pub const ALL: [EmbeddingKind; 4] = [
        EmbeddingKind::VisualRegions,
        EmbeddingKind::AttributeTexts,
        EmbeddingKind::PooledText,
        EmbeddingKind::PooledImage,
    ];

    /// Tag byte used by the binary file format.
    pub fn code(self) -> u8 {
        match self {
            EmbeddingKind::VisualRegions => 0,
            EmbeddingKind::AttributeTexts => 1,
            EmbeddingKind::PooledText => 2,
            EmbeddingKind::PooledImage => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn is_pooled(self) -> bool {
        matches!(self, EmbeddingKind::PooledText | EmbeddingKind::PooledImage)
    }

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingKind::VisualRegions => "visual_regions",
            EmbeddingKind::AttributeTexts => "attribute_texts",
            EmbeddingKind::PooledText => "pooled_text",
            EmbeddingKind::PooledImage => "pooled_image",
        }
    }
}

impl core::str::FromStr for EmbeddingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| alloc::format!("unknown embedding kind '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("row {row} of a {kind} matrix has L2 norm {norm}, expected 1")]
    NotNormalized { kind: &'static str, row: usize, norm: f64 },
}

/// Tolerance on the row norm of pooled embeddings.
pub const POOLED_NORM_TOL: f64 = 1e-6;

/// Rows are regions, attributes, or pooled items; columns are the encoder
/// dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    payload: Matrix,
    kind: EmbeddingKind,
    source_tag: String,
}

impl EmbeddingMatrix {
    /// Wraps a matrix. Pooled kinds must already be unit-normalized.
    pub fn new(payload: Matrix, kind: EmbeddingKind, source_tag: impl Into<String>) -> Result<Self, EmbeddingError> {
        if kind.is_pooled() {
            for (row, r) in payload.row_iter().enumerate() {
                let n = norm(r);
                if (n - 1.0).abs() > POOLED_NORM_TOL {
                    return Err(EmbeddingError::NotNormalized {
                        kind: kind.name(),
                        row,
                        norm: n,
                    });
                }
            }
        }
        Ok(Self {
            payload,
            kind,
            source_tag: source_tag.into(),
        })
    }

    /// Like [`EmbeddingMatrix::new`] but L2-normalizes rows of pooled kinds.
    pub fn normalized(
        payload: Matrix,
        kind: EmbeddingKind,
        source_tag: impl Into<String>,
    ) -> Result<Self, EmbeddingError> {
        let payload = if kind.is_pooled() {
            normalize_rows(&payload)?
        } else {
            payload
        };
        Self::new(payload, kind, source_tag)
    }

    pub fn payload(&self) -> &Matrix {
        &self.payload
    }

    pub fn into_payload(self) -> Matrix {
        self.payload
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    /// Number of rows (N regions or M attributes).
    pub fn count(&self) -> usize {
        self.payload.rows()
    }

    pub fn dim(&self) -> usize {
        self.payload.cols()
    }
}

/// L2-normalizes every row. Zero rows are a numeric error.
pub fn normalize_rows(m: &Matrix) -> Result<Matrix, LinalgError> {
    let mut data = Vec::with_capacity(m.rows() * m.cols());
    for (i, row) in m.row_iter().enumerate() {
        let n = norm(row);
        if n == 0.0 {
            return Err(LinalgError::Numeric(alloc::format!("row {i} has zero norm")));
        }
        data.extend(row.iter().map(|v| v / n));
    }
    Matrix::new(m.rows(), m.cols(), data)
}

/// Deterministic synthetic embeddings.
///
/// Entries are i.i.d. standard normals from [`DetRng`] seeded with `seed`,
/// filled row-major. Pooled kinds are then L2-normalized per row. The
/// output depends only on the arguments.
pub fn synth_embeddings(
    seed: u64,
    count: usize,
    dim: usize,
    kind: EmbeddingKind,
) -> Result<EmbeddingMatrix, EmbeddingError> {
    if count == 0 || dim == 0 {
        return Err(LinalgError::Shape(alloc::format!(
            "synth_embeddings: count and dim must be positive, got {count}x{dim}"
        ))
        .into());
    }
    let mut rng = DetRng::new(seed);
    let data = (0..count * dim).map(|_| rng.standard_normal()).collect();
    let payload = Matrix::new(count, dim, data)?;
    EmbeddingMatrix::normalized(payload, kind, alloc::format!("synth:seed={seed}:{}", kind.name()))
}
