//! Bidirectional coverage attention and the unified completeness score.
//!
//! Regions attend over attributes (`att_v2a`, N×M) and attributes attend
//! over regions (`att_a2v`, M×N). The row maxima of each map are the
//! coverage vectors; their means are combined with a harmonic mean.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingKind, EmbeddingMatrix};
use crate::linalg::{self, LinalgError, Matrix};
use crate::rng::DetRng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompletenessError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("empty attribute pool: completeness is undefined with M = 0")]
    EmptyPool,
    #[error("expected {expected} embeddings, got {got}")]
    WrongKind { expected: &'static str, got: &'static str },
    #[error("projection error: {0}")]
    Projection(String),
}

type Result<T> = core::result::Result<T, CompletenessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionInit {
    SeededOrthogonal,
    IdentityIfSquare,
    File,
}

/// The four projections of the two attention directions.
///
/// `w_q`: d_v×d_k and `w_k`: d_t×d_k for regions-as-queries;
/// `w_q2`: d_t×d_k and `w_k2`: d_v×d_k for attributes-as-queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_q2: Matrix,
    pub w_k2: Matrix,
    pub d_k: usize,
    pub init: ProjectionInit,
}

impl ProjectionSet {
    /// Assembles and validates a set of projections.
    pub fn from_parts(w_q: Matrix, w_k: Matrix, w_q2: Matrix, w_k2: Matrix, init: ProjectionInit) -> Result<Self> {
        let d_k = w_q.cols();
        if d_k == 0 || [&w_k, &w_q2, &w_k2].iter().any(|w| w.cols() != d_k) {
            return Err(CompletenessError::Projection(alloc::format!(
                "projections disagree on d_k: {} {} {} {}",
                w_q.cols(),
                w_k.cols(),
                w_q2.cols(),
                w_k2.cols()
            )));
        }
        if w_q.rows() != w_k2.rows() || w_k.rows() != w_q2.rows() {
            return Err(CompletenessError::Projection(alloc::format!(
                "visual projections have {} and {} rows, text projections {} and {}",
                w_q.rows(),
                w_k2.rows(),
                w_k.rows(),
                w_q2.rows()
            )));
        }
        Ok(Self {
            w_q,
            w_k,
            w_q2,
            w_k2,
            d_k,
            init,
        })
    }

    /// Seeded random projections with orthonormal columns (or rows, when
    /// `d_k` exceeds the input dimension).
    ///
    /// Each matrix is filled with standard normals from [`DetRng`] seeded
    /// with `seed + i` for `i = 0..4` in the order `w_q, w_k, w_q2, w_k2`,
    /// then orthonormalized with modified Gram-Schmidt.
    pub fn seeded_orthogonal(d_v: usize, d_t: usize, d_k: usize, seed: u64) -> Result<Self> {
        let dims = [d_v, d_t, d_t, d_v];
        let mut ws = Vec::with_capacity(4);
        for (i, &d_in) in dims.iter().enumerate() {
            ws.push(random_orthogonal(d_in, d_k, seed.wrapping_add(i as u64))?);
        }
        let w_k2 = ws.pop().unwrap();
        let w_q2 = ws.pop().unwrap();
        let w_k = ws.pop().unwrap();
        let w_q = ws.pop().unwrap();
        Self::from_parts(w_q, w_k, w_q2, w_k2, ProjectionInit::SeededOrthogonal)
    }

    /// All four projections set to the identity. Requires `d_v == d_t == d_k`.
    pub fn identity(d_v: usize, d_t: usize, d_k: usize) -> Result<Self> {
        if d_v != d_k || d_t != d_k {
            return Err(CompletenessError::Projection(alloc::format!(
                "identity projections need d_v = d_t = d_k, got {d_v}, {d_t}, {d_k}"
            )));
        }
        let id = Matrix::identity(d_k);
        Self::from_parts(id.clone(), id.clone(), id.clone(), id, ProjectionInit::IdentityIfSquare)
    }

    pub fn d_v(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_t(&self) -> usize {
        self.w_k.rows()
    }
}

/// `rows × cols` matrix with orthonormal columns when `rows >= cols`,
/// orthonormal rows otherwise.
pub fn random_orthogonal(rows: usize, cols: usize, seed: u64) -> core::result::Result<Matrix, LinalgError> {
    if rows == 0 || cols == 0 {
        return Err(LinalgError::Shape(alloc::format!("random_orthogonal: {rows}x{cols}")));
    }
    let tall = rows >= cols;
    let (n_vec, len) = if tall { (cols, rows) } else { (rows, cols) };
    let mut rng = DetRng::new(seed);
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n_vec);
    while vecs.len() < n_vec {
        let mut v: Vec<f64> = (0..len).map(|_| rng.standard_normal()).collect();
        for u in &vecs {
            let p = linalg::dot(&v, u);
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= p * ui;
            }
        }
        let n = linalg::norm(&v);
        // a draw lying (numerically) in the span so far is discarded
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        vecs.push(v);
    }
    let m = Matrix::from_rows(&vecs)?;
    Ok(if tall { m.transpose() } else { m })
}

/// Everything computed for one image-caption sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub att_v2a: Matrix,
    pub att_a2v: Matrix,
    pub c_region: Vec<f64>,
    pub c_attr: Vec<f64>,
    pub mean_region: f64,
    pub mean_attr: f64,
    pub score: f64,
}

fn check_kind(m: &EmbeddingMatrix, expected: EmbeddingKind) -> Result<()> {
    if m.kind() != expected {
        return Err(CompletenessError::WrongKind {
            expected: expected.name(),
            got: m.kind().name(),
        });
    }
    Ok(())
}

fn check_dims(v: &Matrix, e: &Matrix, p: &ProjectionSet) -> Result<()> {
    if e.rows() == 0 {
        return Err(CompletenessError::EmptyPool);
    }
    if v.rows() == 0 {
        return Err(LinalgError::Shape("no visual regions (N = 0)".into()).into());
    }
    if v.cols() != p.d_v() || e.cols() != p.d_t() {
        return Err(LinalgError::Shape(alloc::format!(
            "embeddings have d_v={} d_t={}, projections expect d_v={} d_t={}",
            v.cols(),
            e.cols(),
            p.d_v(),
            p.d_t()
        ))
        .into());
    }
    Ok(())
}

fn scaled_attention(queries: &Matrix, keys: &Matrix, d_k: usize) -> Result<Matrix> {
    let logits = linalg::matmul_transposed(queries, keys)?.scale(1.0 / libm::sqrt(d_k as f64))?;
    Ok(linalg::row_softmax(&logits)?)
}

/// Regions as queries over attributes: `softmax((V W_q)(E W_k)ᵀ / √d_k)`.
pub fn attention_v2a(v: &Matrix, e: &Matrix, p: &ProjectionSet) -> Result<Matrix> {
    check_dims(v, e, p)?;
    let q = linalg::matmul(v, &p.w_q)?;
    let k = linalg::matmul(e, &p.w_k)?;
    scaled_attention(&q, &k, p.d_k)
}

/// Attributes as queries over regions: `softmax((E W_q2)(V W_k2)ᵀ / √d_k)`.
pub fn attention_a2v(e: &Matrix, v: &Matrix, p: &ProjectionSet) -> Result<Matrix> {
    check_dims(v, e, p)?;
    let q = linalg::matmul(e, &p.w_q2)?;
    let k = linalg::matmul(v, &p.w_k2)?;
    scaled_attention(&q, &k, p.d_k)
}

/// Row maxima of both attention maps: `(c_region, c_attr)`.
pub fn coverage_vectors(att_v2a: &Matrix, att_a2v: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if att_v2a.rows() != att_a2v.cols() || att_v2a.cols() != att_a2v.rows() {
        return Err(LinalgError::Shape(alloc::format!(
            "coverage_vectors: {}x{} and {}x{} are not N×M / M×N",
            att_v2a.rows(),
            att_v2a.cols(),
            att_a2v.rows(),
            att_a2v.cols()
        ))
        .into());
    }
    Ok((linalg::row_max(att_v2a)?, linalg::row_max(att_a2v)?))
}

/// Harmonic mean of two nonnegative values; 0 at (0, 0).
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// `(mean_region, mean_attr, score)`.
pub fn completeness_score(c_region: &[f64], c_attr: &[f64]) -> Result<(f64, f64, f64)> {
    if c_region.is_empty() || c_attr.is_empty() {
        return Err(LinalgError::Shape("completeness_score: empty coverage vector".into()).into());
    }
    if let Some(bad) = c_region.iter().chain(c_attr).find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(LinalgError::Numeric(alloc::format!(
            "completeness_score: coverage entry {bad} is not positive"
        ))
        .into());
    }
    let mean_region = c_region.iter().sum::<f64>() / c_region.len() as f64;
    let mean_attr = c_attr.iter().sum::<f64>() / c_attr.len() as f64;
    Ok((mean_region, mean_attr, harmonic_mean(mean_region, mean_attr)))
}

/// Full report from raw matrices.
pub fn score_matrices(v: &Matrix, e: &Matrix, p: &ProjectionSet) -> Result<CoverageReport> {
    let att_v2a = attention_v2a(v, e, p)?;
    let att_a2v = attention_a2v(e, v, p)?;
    let (c_region, c_attr) = coverage_vectors(&att_v2a, &att_a2v)?;
    let (mean_region, mean_attr, score) = completeness_score(&c_region, &c_attr)?;
    Ok(CoverageReport {
        att_v2a,
        att_a2v,
        c_region,
        c_attr,
        mean_region,
        mean_attr,
        score,
    })
}

/// Full report for a sample: `v` must be region embeddings, `e` attribute
/// embeddings.
pub fn score_sample(v: &EmbeddingMatrix, e: &EmbeddingMatrix, p: &ProjectionSet) -> Result<CoverageReport> {
    check_kind(v, EmbeddingKind::VisualRegions)?;
    check_kind(e, EmbeddingKind::AttributeTexts)?;
    score_matrices(v.payload(), e.payload(), p)
}
