//! Fréchet distance between Gaussian fits of image features.
//!
//! Features come from a fixed, seeded random linear projection of the
//! flattened pixels. Scores are only comparable between sets embedded with
//! the same projector.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, mismatch, Result};
use crate::math;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_FEATURE_DIM: usize = 64;

/// Random projection `P` of shape `(input_dim, feature_dim)` with entries
/// `N(0, 1) / sqrt(input_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProjector {
    matrix: Tensor,
    seed: u64,
}

impl FeatureProjector {
    pub fn new(input_dim: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || feature_dim == 0 {
            return Err(invalid("feature_projector", "dimensions must be positive"));
        }
        let mut rng = rng::seeded(seed, Stream::Projector);
        let scale = 1.0 / math::sqrt(input_dim as f64);
        let mut matrix = rng::normal_tensor(&mut rng, &[input_dim, feature_dim]);
        for v in matrix.data_mut() {
            *v *= scale;
        }
        Ok(Self { matrix, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

/// Flattens each image of `(N, ...)` row-major and multiplies by `P`,
/// giving an `(N, feature_dim)` matrix.
pub fn extract_features(images: &Tensor, proj: &FeatureProjector) -> Result<Tensor> {
    let n = images.shape()[0];
    let per = images.len() / n;
    if per != proj.input_dim() {
        return Err(mismatch("extract_features", images.shape(), proj.matrix.shape()));
    }
    let d = proj.feature_dim();
    let mut out = vec![0.0; n * d];
    crate::autodiff::kernels::gemm_acc(images.data(), proj.matrix.data(), &mut out, n, per, d, false, false);
    Tensor::new(vec![n, d], out)
}

/// Mean vector and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    /// Row-major `dim × dim`.
    pub sigma: Vec<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

pub fn gaussian_stats(features: &Tensor) -> Result<GaussianStats> {
    if features.rank() != 2 {
        return Err(invalid("gaussian_stats", format!("expected a matrix, got {:?}", features.shape())));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if n < 2 {
        return Err(invalid("gaussian_stats", format!("need at least 2 samples, got {n}")));
    }
    let x = features.data();
    let mut mu = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut sigma = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mu) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                sigma[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = sigma[i * d + j] / (n - 1) as f64;
            sigma[i * d + j] = v;
            sigma[j * d + i] = v;
        }
    }
    Ok(GaussianStats { mu, sigma, n })
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as the columns of
/// a row-major `d × d` matrix.
pub fn symmetric_eigen(s: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = s.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in i + 1..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off <= 1e-30 * scale || off == 0.0 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + math::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let sn = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - sn * akq;
                    a[k * d + q] = sn * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - sn * aqk;
                    a[q * d + k] = sn * apk + c * aqk;
                }
                a[p * d + q] = 0.0;
                a[q * d + p] = 0.0;
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - sn * vkq;
                    v[k * d + q] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..d).map(|i| a[i * d + i]).collect();
    (values, v)
}

const SYMMETRY_TOLERANCE: f64 = 1e-9;

fn check_symmetric(op: &'static str, s: &[f64], d: usize) -> Result<()> {
    if s.len() != d * d {
        return Err(invalid(op, format!("expected {} entries for a {d}x{d} matrix, got {}", d * d, s.len())));
    }
    let scale = s.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..d {
        for j in i + 1..d {
            if (s[i * d + j] - s[j * d + i]).abs() > SYMMETRY_TOLERANCE * scale {
                return Err(invalid(op, format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

fn symmetrize(s: &mut [f64], d: usize) {
    for i in 0..d {
        for j in i + 1..d {
            let m = 0.5 * (s[i * d + j] + s[j * d + i]);
            s[i * d + j] = m;
            s[j * d + i] = m;
        }
    }
}

/// Symmetric PSD square root `U·sqrt(max(Λ, 0))·Uᵀ` of a row-major `d × d`
/// matrix.
pub fn matrix_sqrt_psd(s: &[f64], d: usize) -> Result<Vec<f64>> {
    check_symmetric("matrix_sqrt_psd", s, d)?;
    let mut sym = s.to_vec();
    symmetrize(&mut sym, d);
    let (values, u) = symmetric_eigen(&sym, d);
    let roots: Vec<f64> = values.iter().map(|&l| math::sqrt(l.max(0.0))).collect();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += u[i * d + k] * roots[k] * u[j * d + k];
            }
            out[i * d + j] = acc;
            out[j * d + i] = acc;
        }
    }
    Ok(out)
}

/// Sum of square roots of the (clamped) eigenvalues of a symmetric matrix.
fn trace_sqrt(s: &[f64], d: usize) -> f64 {
    let (values, _) = symmetric_eigen(s, d);
    values.iter().map(|&l| math::sqrt(l.max(0.0))).sum()
}

fn matmul_square(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    crate::autodiff::kernels::gemm_acc(a, b, &mut out, d, d, d, false, false);
    out
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2·(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`, clamped at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.sigma.len() != d * d || b.sigma.len() != d * d {
        return Err(mismatch("frechet_distance", &[a.dim(), a.dim()], &[b.dim(), b.dim()]));
    }
    check_symmetric("frechet_distance", &a.sigma, d)?;
    check_symmetric("frechet_distance", &b.sigma, d)?;
    let mean_term: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = matrix_sqrt_psd(&a.sigma, d)?;
    let mut inner = matmul_square(&matmul_square(&root_a, &b.sigma, d), &root_a, d);
    symmetrize(&mut inner, d);
    let cross = trace_sqrt(&inner, d);
    let trace = |s: &[f64]| (0..d).map(|i| s[i * d + i]).sum::<f64>();
    let fid = mean_term + trace(&a.sigma) + trace(&b.sigma) - 2.0 * cross;
    Ok(fid.max(0.0))
}

/// Stats of a whole image set under a projector.
pub fn image_stats(images: &Tensor, proj: &FeatureProjector) -> Result<GaussianStats> {
    gaussian_stats(&extract_features(images, proj)?)
}
