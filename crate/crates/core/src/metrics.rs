//! Joint-space error metrics and embedding-distribution metrics.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::motion::{dist3, JointPositions};
use crate::tensor::Mat;

/// Ridge added to covariances when samples do not outnumber dimensions.
pub const COVARIANCE_RIDGE: f64 = 1e-6;
/// Eigenvalues above this (but below zero) are clipped to zero.
pub const EIGEN_CLIP: f64 = -1e-8;

fn same_shape(a: &JointPositions, b: &JointPositions) -> Result<()> {
    if a.frames != b.frames || a.joints != b.joints {
        return Err(Error::invalid(format!(
            "joint arrays differ: {}×{} vs {}×{}",
            a.frames, a.joints, b.frames, b.joints
        )));
    }
    if a.data.is_empty() {
        return Err(Error::invalid("empty joint array"));
    }
    Ok(())
}

fn mean_joint_distance(a: &JointPositions, b: &JointPositions) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(p, q)| dist3(*p, *q)).sum::<f64>() / a.data.len() as f64)
}

/// Mean per-joint position error between a prediction and ground truth.
pub fn mpjpe(pre: &JointPositions, gt: &JointPositions) -> Result<f64> {
    mean_joint_distance(pre, gt)
}

/// Mean per-joint distance between the two persons of one pair.
pub fn mpjie(person1: &JointPositions, person2: &JointPositions) -> Result<f64> {
    mean_joint_distance(person1, person2)
}

/// `M × E` embeddings from one source.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub features: Mat,
    pub source: String,
}

impl EmbeddingSet {
    pub fn new(features: Mat, source: impl Into<String>) -> Self {
        Self { features, source: source.into() }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

fn row_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn to_dmatrix(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn gaussian_fit(m: &Mat) -> (Vec<f64>, DMatrix<f64>) {
    let (n, e) = m.shape();
    let mut mean = vec![0.0; e];
    for r in 0..n {
        for (acc, v) in mean.iter_mut().zip(m.row(r)) {
            *acc += v / n as f64;
        }
    }
    let mut centered = to_dmatrix(m);
    for r in 0..n {
        for c in 0..e {
            centered[(r, c)] -= mean[c];
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = centered.transpose() * &centered / denom;
    if n <= e {
        for i in 0..e {
            cov[(i, i)] += COVARIANCE_RIDGE;
        }
    }
    (mean, cov)
}

fn clipped_eigenvalues(m: &DMatrix<f64>, what: &str) -> Result<Vec<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    eig.eigenvalues
        .iter()
        .map(|&l| {
            if l >= 0.0 {
                Ok(l)
            } else if l > EIGEN_CLIP {
                Ok(0.0)
            } else {
                Err(Error::numeric(format!("{what} has negative eigenvalue {l:e}")))
            }
        })
        .collect()
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let vals = clipped_eigenvalues(&sym, "covariance")?;
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(vals.len(), vals.iter().map(|v| v.sqrt())));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn fid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.width() != b.width() {
        return Err(Error::invalid(format!("embedding widths differ: {} vs {}", a.width(), b.width())));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("fid needs non-empty embedding sets"));
    }
    let (mu_a, cov_a) = gaussian_fit(&a.features);
    let (mu_b, cov_b) = gaussian_fit(&b.features);
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y).powi(2)).sum();
    // Tr((Σa Σb)^½) = Tr((Σa^½ Σb Σa^½)^½), the inner product being symmetric.
    let root_a = psd_sqrt(&cov_a)?;
    let inner = &root_a * &cov_b * &root_a;
    let cross: f64 = clipped_eigenvalues(&inner, "covariance product")?.iter().map(|v| v.sqrt()).sum();
    let value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::numeric("fid is not finite"));
    }
    Ok(value)
}

/// Mean Euclidean distance between paired motion and text embeddings.
pub fn mm_dist(motion: &EmbeddingSet, text: &EmbeddingSet) -> Result<f64> {
    if motion.len() != text.len() || motion.width() != text.width() {
        return Err(Error::invalid(format!(
            "unpaired embeddings: {:?} vs {:?}",
            motion.features.shape(),
            text.features.shape()
        )));
    }
    if motion.is_empty() {
        return Err(Error::invalid("mm_dist needs at least one pair"));
    }
    let total: f64 = (0..motion.len()).map(|i| row_dist(motion.features.row(i), text.features.row(i))).sum();
    Ok(total / motion.len() as f64)
}

/// `count` index pairs; each reshuffle contributes `⌊M/2⌋` disjoint pairs.
fn random_pairs(m: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(count);
    let mut idx: Vec<usize> = (0..m).collect();
    while out.len() < count {
        idx.shuffle(rng);
        for ch in idx.chunks_exact(2) {
            if out.len() == count {
                break;
            }
            out.push((ch[0], ch[1]));
        }
    }
    out
}

fn mean_pair_distance(m: &Mat, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| row_dist(m.row(i), m.row(j))).sum::<f64>() / pairs.len() as f64
}

/// Mean distance over `pair_count` random disjoint pairs.
pub fn diversity(emb: &EmbeddingSet, pair_count: usize, seed: u64) -> Result<f64> {
    if emb.len() < 2 {
        return Err(Error::invalid("diversity needs at least two embeddings"));
    }
    if pair_count == 0 {
        return Err(Error::invalid("pair_count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(mean_pair_distance(&emb.features, &random_pairs(emb.len(), pair_count, &mut rng)))
}

/// Mean over prompts of the mean distance between that prompt's generations.
pub fn multimodality(per_prompt: &[EmbeddingSet], pair_count: usize, seed: u64) -> Result<f64> {
    if per_prompt.is_empty() {
        return Err(Error::invalid("multimodality needs at least one prompt"));
    }
    if pair_count == 0 {
        return Err(Error::invalid("pair_count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for set in per_prompt {
        if set.len() < 2 {
            return Err(Error::invalid("multimodality needs at least two generations per prompt"));
        }
        total += mean_pair_distance(&set.features, &random_pairs(set.len(), pair_count, &mut rng));
    }
    Ok(total / per_prompt.len() as f64)
}

/// Fraction of motions whose true text ranks within `top_k` by Euclidean
/// distance inside shuffled pools of `pool` pairs (a trailing partial pool
/// is dropped).
pub fn retrieval_precision(
    motion: &EmbeddingSet,
    text: &EmbeddingSet,
    top_k: usize,
    pool: usize,
    seed: u64,
) -> Result<f64> {
    if motion.len() != text.len() || motion.width() != text.width() {
        return Err(Error::invalid("retrieval needs aligned motion/text embeddings"));
    }
    if pool == 0 || pool > motion.len() {
        return Err(Error::invalid(format!("pool size {pool} invalid for {} pairs", motion.len())));
    }
    if top_k == 0 || top_k > pool {
        return Err(Error::invalid(format!("top_k {top_k} outside 1..={pool}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..motion.len()).collect();
    idx.shuffle(&mut rng);
    let (mut hits, mut total) = (0usize, 0usize);
    for group in idx.chunks_exact(pool) {
        for &i in group {
            let own = row_dist(motion.features.row(i), text.features.row(i));
            let closer = group
                .iter()
                .filter(|&&j| j != i && row_dist(motion.features.row(i), text.features.row(j)) < own)
                .count();
            if closer < top_k {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}
