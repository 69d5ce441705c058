//! Brute-force reference implementations used by the test suites.
//!
//! Each function recomputes a quantity along a different path from the
//! library code: plain nested loops, `std` float functions, full sorts,
//! explicit state simulation.

#![allow(dead_code)]

use c3_core::Matrix;

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = b.len();
    let c = b[0].len();
    a.iter()
        .map(|row| (0..c).map(|j| (0..k).map(|t| row[t] * b[t][j]).sum()).collect())
        .collect()
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax_rows(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| {
            let e: Vec<f64> = r.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Straight-line coverage report: attention both ways, maxima, means,
/// harmonic mean.
pub struct OracleReport {
    pub v2a: Vec<Vec<f64>>,
    pub a2v: Vec<Vec<f64>>,
    pub c_region: Vec<f64>,
    pub c_attr: Vec<f64>,
    pub mean_region: f64,
    pub mean_attr: f64,
    pub score: f64,
}

pub fn coverage_report(
    v: &[Vec<f64>],
    e: &[Vec<f64>],
    w_q: &[Vec<f64>],
    w_k: &[Vec<f64>],
    w_q2: &[Vec<f64>],
    w_k2: &[Vec<f64>],
) -> OracleReport {
    let d_k = w_q[0].len() as f64;
    let scale = |m: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        m.into_iter()
            .map(|r| r.into_iter().map(|x| x / d_k.sqrt()).collect())
            .collect()
    };
    let q = mat_mul(v, w_q);
    let k = mat_mul(e, w_k);
    let v2a = softmax_rows(&scale(mat_mul(&q, &transpose(&k))));
    let q2 = mat_mul(e, w_q2);
    let k2 = mat_mul(v, w_k2);
    let a2v = softmax_rows(&scale(mat_mul(&q2, &transpose(&k2))));
    let row_max = |m: &[Vec<f64>]| -> Vec<f64> {
        m.iter()
            .map(|r| {
                let mut best = r[0];
                for &x in r {
                    if x > best {
                        best = x;
                    }
                }
                best
            })
            .collect()
    };
    let c_region = row_max(&v2a);
    let c_attr = row_max(&a2v);
    let mean_region = c_region.iter().sum::<f64>() / c_region.len() as f64;
    let mean_attr = c_attr.iter().sum::<f64>() / c_attr.len() as f64;
    let score = 2.0 * mean_region * mean_attr / (mean_region + mean_attr);
    OracleReport {
        v2a,
        a2v,
        c_region,
        c_attr,
        mean_region,
        mean_attr,
        score,
    }
}

/// Verdict of the verification automaton simulated directly from its
/// rules: walk the stages in order, stop at the first No.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleVerdict {
    Accept,
    Reject,
}

/// Returns the verdict and the number of questions asked.
pub fn automaton(bank: &[usize; 4], answers: &[bool]) -> (OracleVerdict, usize) {
    let mut asked = 0;
    for &n in bank {
        for _ in 0..n {
            let yes = answers[asked];
            asked += 1;
            if !yes {
                return (OracleVerdict::Reject, asked);
            }
        }
    }
    (OracleVerdict::Accept, asked)
}

/// Recall@K by fully sorting each query's candidates: descending score,
/// equal scores by ascending index except the ground truth goes last.
pub fn recall_by_sort(sim: &[Vec<f64>], k: usize, by_rows: bool) -> f64 {
    let z = sim.len();
    let mut hits = 0;
    for (q, row) in sim.iter().enumerate() {
        let score = |c: usize| if by_rows { row[c] } else { sim[c][q] };
        let mut cands: Vec<usize> = (0..z).collect();
        cands.sort_by(|&a, &b| {
            score(b)
                .partial_cmp(&score(a))
                .unwrap()
                .then_with(|| (a == q).cmp(&(b == q)))
                .then_with(|| a.cmp(&b))
        });
        let pos = cands.iter().position(|&c| c == q).unwrap();
        if pos < k.min(z) {
            hits += 1;
        }
    }
    100.0 * hits as f64 / z as f64
}

use c3_core::completeness::ProjectionSet;
use c3_core::embedding::{synth_embeddings, EmbeddingKind, EmbeddingMatrix};

/// The seed-42 scoring fixture: 3 regions and 2 attributes in 4 dimensions,
/// `d_k = 4`, seeded orthogonal projections.
pub fn seed42_fixture() -> (EmbeddingMatrix, EmbeddingMatrix, ProjectionSet) {
    let v = synth_embeddings(42, 3, 4, EmbeddingKind::VisualRegions).unwrap();
    let e = synth_embeddings(43, 2, 4, EmbeddingKind::AttributeTexts).unwrap();
    let p = ProjectionSet::seeded_orthogonal(4, 4, 4, 42).unwrap();
    (v, e, p)
}

/// A random scoring fixture with shape drawn from `seed`.
pub fn random_fixture(seed: u64) -> (EmbeddingMatrix, EmbeddingMatrix, ProjectionSet) {
    let mut r = c3_core::rng::DetRng::new(seed ^ 0xC0FFEE);
    let n = 1 + r.index(12);
    let m = 1 + r.index(10);
    let d_v = 2 + r.index(14);
    let d_t = 2 + r.index(14);
    let d_k = 1 + r.index(d_v.min(d_t));
    let v = synth_embeddings(seed, n, d_v, EmbeddingKind::VisualRegions).unwrap();
    let e = synth_embeddings(seed.wrapping_add(1_000_003), m, d_t, EmbeddingKind::AttributeTexts).unwrap();
    let p = ProjectionSet::seeded_orthogonal(d_v, d_t, d_k, seed.wrapping_mul(31)).unwrap();
    (v, e, p)
}
