//! Contrastive alignment over pooled embeddings and Recall@K evaluation.
//!
//! Two linear heads map frozen pooled text and image embeddings into a
//! shared space. The loss is the symmetric InfoNCE objective over cosine
//! similarities divided by a learnable temperature `gamma`, with every
//! candidate (the positive included) in the denominator:
//!
//! ```text
//! L_i2t = -1/Z Σ_i log softmax_k(S(img_i, txt_k) / gamma)[i]
//! L_t2i = -1/Z Σ_i log softmax_k(S(txt_i, img_k) / gamma)[i]
//! L     = (L_i2t + L_t2i) / 2
//! ```

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::completeness::random_orthogonal;
use crate::linalg::{self, dot, norm, LinalgError, Matrix};
use crate::rng::DetRng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("config error: {0}")]
    Config(String),
}

type Result<T> = core::result::Result<T, RetrievalError>;

pub const GAMMA_MIN: f64 = 0.01;
pub const GAMMA_MAX: f64 = 100.0;

/// Cosine similarity.
pub fn similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(LinalgError::Shape(alloc::format!("similarity: lengths {} and {}", u.len(), v.len())).into());
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(LinalgError::Numeric("similarity: zero-norm input".into()).into());
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Loss value and gradients with respect to both (unnormalized) batches
/// and `log_gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_img: Matrix,
    pub grad_txt: Matrix,
    pub grad_log_gamma: f64,
}

fn log_softmax_rows(logits: &[f64], z: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(z * z);
    for row in logits.chunks_exact(z) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Symmetric contrastive loss for a batch of `Z` paired rows.
///
/// Rows are L2-normalized inside the op; gradients flow back through the
/// normalization, the `1/gamma` scaling, and both log-softmaxes.
pub fn contrastive_loss(img: &Matrix, txt: &Matrix, gamma: f64) -> Result<LossOutput> {
    if img.shape() != txt.shape() || img.rows() == 0 || img.cols() == 0 {
        return Err(LinalgError::Shape(alloc::format!(
            "contrastive_loss: image batch {:?} vs text batch {:?}",
            img.shape(),
            txt.shape()
        ))
        .into());
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(LinalgError::Numeric(alloc::format!("gamma must be positive, got {gamma}")).into());
    }
    let (z, d) = img.shape();
    let img_n: Vec<f64> = img.row_iter().map(norm).collect();
    let txt_n: Vec<f64> = txt.row_iter().map(norm).collect();
    if img_n.iter().chain(&txt_n).any(|n| *n == 0.0) {
        return Err(LinalgError::Numeric("contrastive_loss: zero-norm row".into()).into());
    }
    let u = crate::embedding::normalize_rows(img)?;
    let w = crate::embedding::normalize_rows(txt)?;

    // logits[i][k] = S(img_i, txt_k) / gamma
    let sims = linalg::matmul_transposed(&u, &w)?;
    let logits: Vec<f64> = sims.as_slice().iter().map(|s| s / gamma).collect();
    let logits_t = Matrix::new(z, z, logits.clone())?.transpose().into_vec();

    let lsm_i2t = log_softmax_rows(&logits, z);
    let lsm_t2i = log_softmax_rows(&logits_t, z);
    let l_i2t = -(0..z).map(|i| lsm_i2t[i * z + i]).sum::<f64>() / z as f64;
    let l_t2i = -(0..z).map(|i| lsm_t2i[i * z + i]).sum::<f64>() / z as f64;
    let loss = 0.5 * (l_i2t + l_t2i);

    // dL/dlogits[i][k] = ((P_ik - δ_ik) + (Q_ki - δ_ik)) / 2Z where P is the
    // row softmax of logits and Q the row softmax of its transpose
    let scale = 0.5 / z as f64;
    let mut g_logit = vec![0.0; z * z];
    for i in 0..z {
        for k in 0..z {
            let delta = if i == k { 1.0 } else { 0.0 };
            let p = libm::exp(lsm_i2t[i * z + k]);
            let q = libm::exp(lsm_t2i[k * z + i]);
            g_logit[i * z + k] = scale * ((p - delta) + (q - delta));
        }
    }
    let grad_log_gamma = -g_logit.iter().zip(&logits).map(|(g, l)| g * l).sum::<f64>();
    let g_sim = Matrix::new(z, z, g_logit.iter().map(|g| g / gamma).collect())?;

    // dL/du = G w, dL/dw = Gᵀ u, then back through x ↦ x/|x|
    let g_u = linalg::matmul(&g_sim, &w)?;
    let g_w = linalg::matmul(&g_sim.transpose(), &u)?;
    let back = |g: &Matrix, unit: &Matrix, norms: &[f64]| -> Result<Matrix> {
        let mut out = Vec::with_capacity(z * d);
        for (r, n) in norms.iter().enumerate() {
            let (gr, ur) = (g.row(r), unit.row(r));
            let proj = dot(gr, ur);
            out.extend(gr.iter().zip(ur).map(|(gi, ui)| (gi - ui * proj) / n));
        }
        Ok(Matrix::new(z, d, out)?)
    };
    Ok(LossOutput {
        loss,
        grad_img: back(&g_u, &u, &img_n)?,
        grad_txt: back(&g_w, &w, &txt_n)?,
        grad_log_gamma,
    })
}

/// Affine map `x ↦ x W + b` into the joint space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ProjectionHead {
    /// Identity when `in_dim == out_dim`, otherwise a seeded matrix with
    /// orthonormal columns (rows when widening) and zero bias.
    pub fn init(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        let weights = if in_dim == out_dim {
            Matrix::identity(in_dim)
        } else {
            random_orthogonal(in_dim, out_dim, seed)?
        };
        Ok(Self {
            weights,
            bias: vec![0.0; out_dim],
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = linalg::matmul(x, &self.weights)?;
        let out = self.out_dim();
        let bias = &self.bias;
        for row in y.data_mut().chunks_exact_mut(out) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weights.as_slice());
        out.extend_from_slice(&self.bias);
    }

    fn read_params(&mut self, src: &[f64]) {
        let nw = self.weights.rows() * self.weights.cols();
        self.weights.data_mut().copy_from_slice(&src[..nw]);
        let nb = self.bias.len();
        self.bias.copy_from_slice(&src[nw..nw + nb]);
    }

    /// Gradients of the head parameters given the input batch and the
    /// gradient at the head's output, flattened like the parameters.
    fn param_grad(&self, x: &Matrix, g_out: &Matrix, out: &mut Vec<f64>) -> Result<()> {
        let gw = linalg::matmul(&x.transpose(), g_out)?;
        out.extend_from_slice(gw.as_slice());
        let mut gb = vec![0.0; self.out_dim()];
        for row in g_out.row_iter() {
            for (b, g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        out.extend_from_slice(&gb);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Joint-space dimension; defaults to the smaller input dimension.
    pub out_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch_size: 32,
            epochs: 3,
            seed: 0,
            out_dim: None,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub text_head: ProjectionHead,
    pub image_head: ProjectionHead,
    pub log_gamma: f64,
    pub step: u64,
    /// Batch loss before each update.
    pub loss_history: Vec<f64>,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainState {
    pub fn new(text_dim: usize, image_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            text_head: ProjectionHead::init(text_dim, out_dim, seed)?,
            image_head: ProjectionHead::init(image_dim, out_dim, seed)?,
            log_gamma: libm::log(0.07),
            step: 0,
            loss_history: Vec::new(),
            epoch_losses: Vec::new(),
        })
    }

    pub fn gamma(&self) -> f64 {
        libm::exp(self.log_gamma).clamp(GAMMA_MIN, GAMMA_MAX)
    }

    fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        self.text_head.write_params(&mut p);
        self.image_head.write_params(&mut p);
        p.push(self.log_gamma);
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let nt = self.text_head.param_count();
        let ni = self.image_head.param_count();
        self.text_head.read_params(&p[..nt]);
        self.image_head.read_params(&p[nt..nt + ni]);
        self.log_gamma = p[nt + ni].clamp(libm::log(GAMMA_MIN), libm::log(GAMMA_MAX));
    }

    fn param_count(&self) -> usize {
        self.text_head.param_count() + self.image_head.param_count() + 1
    }

    /// Loss and flattened parameter gradient on one batch.
    pub fn batch_loss(&self, txt: &Matrix, img: &Matrix) -> Result<(f64, Vec<f64>)> {
        let pt = self.text_head.forward(txt)?;
        let pi = self.image_head.forward(img)?;
        let out = contrastive_loss(&pi, &pt, self.gamma())?;
        let mut grad = Vec::with_capacity(self.param_count());
        self.text_head.param_grad(txt, &out.grad_txt, &mut grad)?;
        self.image_head.param_grad(img, &out.grad_img, &mut grad)?;
        grad.push(out.grad_log_gamma);
        Ok((out.loss, grad))
    }

    /// Projects and L2-normalizes both sides, returning the `Z×Z`
    /// image-by-text cosine similarity matrix.
    pub fn similarity_matrix(&self, txt: &Matrix, img: &Matrix) -> Result<Matrix> {
        let pt = crate::embedding::normalize_rows(&self.text_head.forward(txt)?)?;
        let pi = crate::embedding::normalize_rows(&self.image_head.forward(img)?)?;
        Ok(linalg::matmul_transposed(&pi, &pt)?)
    }
}

/// Mini-batch Adam over both heads and `log_gamma`.
///
/// Row `r` of `txt` pairs with row `r` of `img`. Each epoch shuffles the
/// pair indices with a [`DetRng`] seeded from `config.seed` (one stream for
/// the whole run) and walks them in batches of `batch_size`; a trailing
/// batch of a single pair carries no negatives and is skipped.
pub fn train(txt: &Matrix, img: &Matrix, config: &TrainConfig) -> Result<TrainState> {
    if txt.rows() != img.rows() {
        return Err(LinalgError::Shape(alloc::format!(
            "train: {} text rows vs {} image rows",
            txt.rows(),
            img.rows()
        ))
        .into());
    }
    if txt.rows() < 2 {
        return Err(RetrievalError::Config(alloc::format!(
            "train needs at least 2 pairs, got {}",
            txt.rows()
        )));
    }
    if config.batch_size < 2 && config.epochs > 0 {
        return Err(RetrievalError::Config(alloc::format!(
            "batch_size {} leaves no in-batch negatives",
            config.batch_size
        )));
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(RetrievalError::Config(alloc::format!("invalid lr {}", config.lr)));
    }
    let out_dim = config.out_dim.unwrap_or(txt.cols().min(img.cols()));
    if out_dim == 0 {
        return Err(RetrievalError::Config("out_dim must be positive".into()));
    }
    let mut state = TrainState::new(txt.cols(), img.cols(), out_dim, config.seed)?;
    let mut params = state.params();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut rng = DetRng::new(config.seed);
    let mut order: Vec<usize> = (0..txt.rows()).collect();

    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let bt = txt.select_rows(chunk);
            let bi = img.select_rows(chunk);
            let (loss, grad) = state.batch_loss(&bt, &bi)?;
            state.loss_history.push(loss);
            epoch_sum += loss;
            batches += 1;

            state.step += 1;
            let t = state.step as i32;
            let bc1 = 1.0 - libm::pow(ADAM_BETA1, t as f64);
            let bc2 = 1.0 - libm::pow(ADAM_BETA2, t as f64);
            for (i, g) in grad.iter().enumerate() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= config.lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
            }
            state.set_params(&params);
            // keep the optimizer's copy consistent with the clamp
            let last = params.len() - 1;
            params[last] = state.log_gamma;
        }
        if batches > 0 {
            state.epoch_losses.push(epoch_sum / batches as f64);
        }
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Image queries ranked over texts (rows of the similarity matrix).
    I2t,
    /// Text queries ranked over images (columns).
    T2i,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalRecall {
    pub direction: Direction,
    /// Requested K → percentage of queries whose match ranks in the top K.
    pub recall_at: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub i2t: DirectionalRecall,
    pub t2i: DirectionalRecall,
    /// Mean of all recalls in both directions (`mR`).
    pub mean_recall: f64,
    /// Sum of all recalls in both directions (`Rsum`).
    pub rsum: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// 0-based rank of the ground truth for query `q` in `scores`, with every
/// tied candidate placed ahead of it.
fn pessimistic_rank(scores: impl Iterator<Item = f64> + Clone, q: usize) -> usize {
    let target = scores.clone().nth(q).unwrap();
    scores.enumerate().filter(|(j, s)| *j != q && *s >= target).count()
}

/// Recall@K in one direction. The diagonal holds the ground truth.
/// K larger than Z is clipped to Z; the returned warnings say so.
pub fn recall_at_k(sim: &Matrix, ks: &[usize], direction: Direction) -> Result<(DirectionalRecall, Vec<String>)> {
    let z = sim.rows();
    if z != sim.cols() || z == 0 {
        return Err(LinalgError::Shape(alloc::format!(
            "recall_at_k: similarity matrix {}x{} is not square and nonempty",
            sim.rows(),
            sim.cols()
        ))
        .into());
    }
    let ranks: Vec<usize> = (0..z)
        .map(|q| match direction {
            Direction::I2t => pessimistic_rank(sim.row(q).iter().copied(), q),
            Direction::T2i => pessimistic_rank((0..z).map(|r| sim.get(r, q)), q),
        })
        .collect();
    let mut warnings = Vec::new();
    let mut recall_at = BTreeMap::new();
    for &k in ks {
        let eff = if k > z {
            warnings.push(alloc::format!("K={k} exceeds Z={z}; clipped to {z}"));
            z
        } else {
            k
        };
        let hits = ranks.iter().filter(|r| **r < eff).count();
        recall_at.insert(k, 100.0 * hits as f64 / z as f64);
    }
    Ok((DirectionalRecall { direction, recall_at }, warnings))
}

/// Both directions plus `mR` and `Rsum`.
pub fn evaluate(sim: &Matrix, ks: &[usize]) -> Result<RetrievalMetrics> {
    let (i2t, mut warnings) = recall_at_k(sim, ks, Direction::I2t)?;
    let (t2i, w2) = recall_at_k(sim, ks, Direction::T2i)?;
    for w in w2 {
        if !warnings.contains(&w) {
            warnings.push(w);
        }
    }
    let rsum: f64 = i2t.recall_at.values().chain(t2i.recall_at.values()).sum();
    let n = i2t.recall_at.len() + t2i.recall_at.len();
    Ok(RetrievalMetrics {
        i2t,
        t2i,
        mean_recall: if n == 0 { 0.0 } else { rsum / n as f64 },
        rsum,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{synth_embeddings, EmbeddingKind};

    #[test]
    fn cosine_cases() {
        let u = [0.3, -1.2, 2.0];
        assert!((similarity(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!((similarity(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn singleton_batch_has_zero_loss() {
        let a = Matrix::new(1, 3, vec![0.2, 0.5, -1.0]).unwrap();
        let b = Matrix::new(1, 3, vec![1.0, 0.0, 4.0]).unwrap();
        let out = contrastive_loss(&a, &b, 0.07).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_img.as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn loss_shape_errors() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(3, 3);
        assert!(matches!(
            contrastive_loss(&a, &b, 1.0),
            Err(RetrievalError::Linalg(LinalgError::Shape(_)))
        ));
        assert!(matches!(
            contrastive_loss(&a, &a, 1.0),
            Err(RetrievalError::Linalg(LinalgError::Numeric(_)))
        ));
    }

    #[test]
    fn swapping_batches_keeps_loss() {
        let a = synth_embeddings(1, 5, 8, EmbeddingKind::VisualRegions)
            .unwrap()
            .into_payload();
        let b = synth_embeddings(2, 5, 8, EmbeddingKind::VisualRegions)
            .unwrap()
            .into_payload();
        let x = contrastive_loss(&a, &b, 0.3).unwrap().loss;
        let y = contrastive_loss(&b, &a, 0.3).unwrap().loss;
        assert!((x - y).abs() < 1e-12);
        assert!(x > 0.0);
    }

    #[test]
    fn head_forward_adds_bias() {
        let mut h = ProjectionHead::init(2, 2, 0).unwrap();
        h.bias = vec![1.0, -1.0];
        let x = Matrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(h.forward(&x).unwrap().as_slice(), &[4.0, 3.0]);
        let wide = ProjectionHead::init(6, 3, 1).unwrap();
        assert_eq!((wide.in_dim(), wide.out_dim()), (6, 3));
    }

    fn fixture(n: usize, d: usize, seed: u64) -> (Matrix, Matrix) {
        let img = synth_embeddings(seed, n, d, EmbeddingKind::PooledImage)
            .unwrap()
            .into_payload();
        (img.clone(), img)
    }

    #[test]
    fn train_rejects_bad_configs() {
        let (t, i) = fixture(4, 4, 1);
        let cfg = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(matches!(train(&t, &i, &cfg), Err(RetrievalError::Config(_))));
        let (t1, i1) = fixture(1, 4, 1);
        assert!(matches!(
            train(&t1, &i1, &TrainConfig::default()),
            Err(RetrievalError::Config(_))
        ));
        let cfg = TrainConfig {
            batch_size: 1,
            epochs: 0,
            ..Default::default()
        };
        assert!(train(&t, &i, &cfg).is_ok());
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (t, i) = fixture(16, 6, 3);
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 16,
            epochs: 3,
            seed: 1,
            out_dim: Some(4),
        };
        let s = train(&t, &i, &cfg).unwrap();
        let fresh = TrainState::new(6, 6, 4, 1).unwrap();
        assert_eq!(s.text_head, fresh.text_head);
        assert_eq!(s.image_head, fresh.image_head);
        assert_eq!(s.log_gamma, fresh.log_gamma);
        assert_eq!(s.loss_history.len(), 3);
        assert!(s.loss_history.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let txt = synth_embeddings(11, 5, 6, EmbeddingKind::PooledText)
            .unwrap()
            .into_payload();
        let img = synth_embeddings(12, 5, 7, EmbeddingKind::PooledImage)
            .unwrap()
            .into_payload();
        let mut state = TrainState::new(6, 7, 4, 2).unwrap();
        state.log_gamma = libm::log(0.5);
        state.text_head.bias = vec![0.1, -0.2, 0.05, 0.3];
        let (_, grad) = state.batch_loss(&txt, &img).unwrap();
        let base = state.params();
        let fd = linalg::finite_diff_grad(
            |p| {
                let mut s = state.clone();
                s.set_params(p);
                s.batch_loss(&txt, &img).unwrap().0
            },
            &base,
            1e-5,
        )
        .unwrap();
        for (a, n) in grad.iter().zip(&fd) {
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-6) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn gamma_is_clamped() {
        let mut s = TrainState::new(2, 2, 2, 0).unwrap();
        s.log_gamma = -50.0;
        assert_eq!(s.gamma(), GAMMA_MIN);
        s.log_gamma = 50.0;
        assert_eq!(s.gamma(), GAMMA_MAX);
    }

    #[test]
    fn identity_like_recall() {
        let sim = Matrix::identity(12);
        let m = evaluate(&sim, &DEFAULT_KS).unwrap();
        assert_eq!(m.i2t.recall_at[&1], 100.0);
        assert_eq!(m.t2i.recall_at[&1], 100.0);
        assert_eq!(m.rsum, 600.0);
        assert_eq!(m.mean_recall, 100.0);
    }

    #[test]
    fn all_ties_are_pessimistic() {
        let sim = Matrix::new(10, 10, vec![0.5; 100]).unwrap();
        let m = evaluate(&sim, &DEFAULT_KS).unwrap();
        for d in [&m.i2t, &m.t2i] {
            assert_eq!(d.recall_at[&1], 0.0);
            assert_eq!(d.recall_at[&5], 0.0);
            assert_eq!(d.recall_at[&10], 100.0);
        }
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn k_beyond_z_is_clipped_with_warning() {
        let sim = Matrix::new(3, 3, vec![0.0; 9]).unwrap();
        let m = evaluate(&sim, &DEFAULT_KS).unwrap();
        assert_eq!(m.i2t.recall_at[&5], 100.0);
        assert_eq!(m.warnings.len(), 2);
        assert!(evaluate(&Matrix::zeros(2, 3), &DEFAULT_KS).is_err());
    }
}
