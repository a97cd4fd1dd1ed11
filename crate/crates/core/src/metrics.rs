//! Sample-quality metrics: Fréchet distance between embedding statistics,
//! pooled unigram entropy, and summary statistics of latents against N(0, I).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{CouplingError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::types::TokenSequence;

/// Natural-log entropy of the pooled token frequencies.
pub fn unigram_entropy(samples: &[TokenSequence]) -> Result<f64> {
    let first = samples
        .first()
        .ok_or_else(|| CouplingError::InvalidArgument("entropy of an empty sample set".into()))?;
    let mut counts = vec![0usize; first.vocab_size() + 1];
    for x in samples {
        for &t in x.tokens() {
            if t >= counts.len() {
                return Err(CouplingError::TokenOutOfRange {
                    token: t,
                    vocab: counts.len(),
                });
            }
            counts[t] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum::<f64>()
        .abs())
}

/// Mean and unbiased covariance of a set of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianFit {
    /// Fit to the rows of `features`.
    pub fn from_rows(features: &DMatrix<f64>) -> Result<Self> {
        let n = features.nrows();
        if n < 2 {
            return Err(CouplingError::InvalidArgument(format!(
                "a covariance needs at least 2 samples, got {n}"
            )));
        }
        let mean = features.row_mean().transpose();
        let mut centered = features.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(GaussianFit { mean, cov, count: n })
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`, with the trace of the
/// matrix root taken as `Tr((S1^(1/2) S2 S1^(1/2))^(1/2))`.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(CouplingError::Shape("feature dimensions differ".into()));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let root_a = psd_sqrt(&a.cov);
    let inner = &root_a * &b.cov * &root_a;
    let cross = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum::<f64>();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Preprocessing and feature layer of an image embedding; recorded with every
/// FID value since FID depends on all of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingProtocol {
    pub name: String,
    pub input_size: usize,
    pub resize: String,
    pub channels: usize,
    pub layer: String,
    pub dim: usize,
}

impl EmbeddingProtocol {
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("protocol serializes")))
    }
}

/// Grayscale images in `[0, 1]`, `side x side`, row-major.
pub trait ImageEmbedding {
    fn protocol(&self) -> EmbeddingProtocol;
    /// One feature row per image.
    fn embed(&self, images: &[Vec<f32>], side: usize) -> Result<DMatrix<f64>>;
}

/// Bilinear resize (align-corners off, half-pixel centers) of a square
/// grayscale image, replicated to `channels` planes.
pub fn prepare_image(image: &[f32], side: usize, size: usize, channels: usize) -> Vec<f32> {
    let scale = side as f32 / size as f32;
    let at = |y: usize, x: usize| image[y.min(side - 1) * side + x.min(side - 1)];
    let mut plane = Vec::with_capacity(size * size);
    for oy in 0..size {
        let fy = ((oy as f32 + 0.5) * scale - 0.5).max(0.0);
        let (y0, wy) = (fy.floor() as usize, fy - fy.floor());
        for ox in 0..size {
            let fx = ((ox as f32 + 0.5) * scale - 0.5).max(0.0);
            let (x0, wx) = (fx.floor() as usize, fx - fx.floor());
            let top = at(y0, x0) * (1.0 - wx) + at(y0, x0 + 1) * wx;
            let bottom = at(y0 + 1, x0) * (1.0 - wx) + at(y0 + 1, x0 + 1) * wx;
            plane.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    plane.repeat(channels)
}

/// Raw pixels as features. A stand-in for when no pretrained network is
/// available; its values are not comparable with Inception-based FID.
#[derive(Clone, Copy, Debug)]
pub struct PixelEmbedding {
    pub side: usize,
}

impl ImageEmbedding for PixelEmbedding {
    fn protocol(&self) -> EmbeddingProtocol {
        EmbeddingProtocol {
            name: "pixels".into(),
            input_size: self.side,
            resize: "none".into(),
            channels: 1,
            layer: "identity".into(),
            dim: self.side * self.side,
        }
    }

    fn embed(&self, images: &[Vec<f32>], side: usize) -> Result<DMatrix<f64>> {
        if side != self.side {
            return Err(CouplingError::Shape(format!("expected {0}x{0} images, got side {side}", self.side)));
        }
        let dim = side * side;
        if images.iter().any(|im| im.len() != dim) {
            return Err(CouplingError::Shape(format!("images must have {dim} pixels")));
        }
        Ok(DMatrix::from_fn(images.len(), dim, |r, c| images[r][c] as f64))
    }
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub protocol_digest: Option<String>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null", default)]
    pub protocol: serde_json::Value,
}

pub fn fid(
    samples: &[Vec<f32>],
    reference: &[Vec<f32>],
    side: usize,
    embedding: &dyn ImageEmbedding,
) -> Result<MetricRecord> {
    let a = GaussianFit::from_rows(&embedding.embed(samples, side)?)?;
    let b = GaussianFit::from_rows(&embedding.embed(reference, side)?)?;
    let protocol = embedding.protocol();
    Ok(MetricRecord {
        name: "fid".into(),
        value: frechet_distance(&a, &b)?,
        samples: samples.len(),
        protocol_digest: Some(protocol.digest()),
        protocol: serde_json::to_value(protocol)?,
    })
}

/// Grayscale image of a binary token sequence.
pub fn sequence_image(x: &TokenSequence) -> Vec<f32> {
    x.tokens().iter().map(|&t| t as f32).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianityReport {
    pub per_dim_mean: Vec<f64>,
    pub per_dim_std: Vec<f64>,
    pub max_abs_offdiag_corr: f64,
    /// Largest `|cov - I|` entry.
    pub max_abs_cov_error: f64,
    /// Largest per-dimension Kolmogorov-Smirnov distance to N(0, 1).
    pub ks_stat_max: f64,
    pub degenerate: bool,
}

impl GaussianityReport {
    pub fn max_abs_mean(&self) -> f64 {
        self.per_dim_mean.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_std_error(&self) -> f64 {
        self.per_dim_std.iter().fold(0.0, |m, v| m.max((v - 1.0).abs()))
    }
}

pub const MIN_DIAGNOSTIC_LATENTS: usize = 100;
const DEGENERATE_STD: f64 = 1e-8;

/// Summary of latent rows against N(0, I).
pub fn gaussianity_diagnostics<F: Scalar>(latents: &Tensor<F>) -> Result<GaussianityReport> {
    let (n, d) = latents.shape();
    if n < MIN_DIAGNOSTIC_LATENTS {
        return Err(CouplingError::InvalidArgument(format!(
            "need at least {MIN_DIAGNOSTIC_LATENTS} latents, got {n}"
        )));
    }
    let m = DMatrix::from_fn(n, d, |r, c| latents.get(r, c).as_f64());
    let fit = GaussianFit::from_rows(&m)?;
    let std: Vec<f64> = (0..d).map(|i| fit.cov[(i, i)].sqrt()).collect();
    let degenerate = std.iter().any(|&s| s < DEGENERATE_STD);
    let mut max_corr: f64 = 0.0;
    let mut max_cov: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { 1.0 } else { 0.0 };
            max_cov = max_cov.max((fit.cov[(i, j)] - target).abs());
            if i != j && std[i] >= DEGENERATE_STD && std[j] >= DEGENERATE_STD {
                max_corr = max_corr.max((fit.cov[(i, j)] / (std[i] * std[j])).abs());
            }
        }
    }
    let normal = Normal::standard();
    let mut ks_max: f64 = 0.0;
    for c in 0..d {
        let mut col: Vec<f64> = m.column(c).iter().copied().collect();
        col.sort_by(f64::total_cmp);
        for (i, &v) in col.iter().enumerate() {
            let cdf = normal.cdf(v);
            let hi = (i + 1) as f64 / n as f64 - cdf;
            let lo = cdf - i as f64 / n as f64;
            ks_max = ks_max.max(hi).max(lo);
        }
    }
    Ok(GaussianityReport {
        per_dim_mean: fit.mean.iter().copied().collect(),
        per_dim_std: std,
        max_abs_offdiag_corr: max_corr,
        max_abs_cov_error: max_cov,
        ks_stat_max: ks_max,
        degenerate,
    })
}
