//! Image quality metrics: PSNR, SSIM and a Fréchet distance over pooled
//! random-feature embeddings (distributional fidelity proxy; not FID — no
//! pretrained network is involved).

use crate::rng::{stream, TAG_FEATURES};
use crate::tensor::{conv2d_forward, EngineError, Tensor};

/// 10*log10(1/MSE) for images in [0,1], capped at 100 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64, EngineError> {
    if a.shape() != b.shape() {
        return Err(EngineError::ShapeMismatch {
            op: "psnr",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse <= 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

/// Mean squared error in f64 (helper for attack bookkeeping).
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64, EngineError> {
    if a.shape() != b.shape() {
        return Err(EngineError::ShapeMismatch {
            op: "mse",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// SSIM with an 11x11 Gaussian window (sigma 1.5), standard constants for
/// unit dynamic range, valid-window sliding, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64, EngineError> {
    let (c, h, w) = match (a.shape(), b.shape()) {
        ([c1, h1, w1], [c2, h2, w2]) if c1 == c2 && h1 == h2 && w1 == w2 => (*c1, *h1, *w1),
        _ => {
            return Err(EngineError::ShapeMismatch {
                op: "ssim",
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            })
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EngineError::Invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = ssim_window();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ci in 0..c {
        let pa = &a.data()[ci * h * w..(ci + 1) * h * w];
        let pb = &b.data()[ci * h * w..(ci + 1) * h * w];
        for oy in 0..=(h - SSIM_WINDOW) {
            for ox in 0..=(w - SSIM_WINDOW) {
                let (mut mu_a, mut mu_b) = (0.0f64, 0.0f64);
                let (mut aa, mut bb, mut ab) = (0.0f64, 0.0f64, 0.0f64);
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let wt = win[wy * SSIM_WINDOW + wx];
                        let va = f64::from(pa[(oy + wy) * w + ox + wx]);
                        let vb = f64::from(pb[(oy + wy) * w + ox + wx]);
                        mu_a += wt * va;
                        mu_b += wt * vb;
                        aa += wt * va * va;
                        bb += wt * vb * vb;
                        ab += wt * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

// -- Frechet distance over feature embeddings ------------------------------

/// Fixed random conv embedder used for the distributional-fidelity proxy.
pub struct FeatureEmbedder {
    w1: Tensor,
    w2: Tensor,
    pub dim: usize,
}

impl FeatureEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = stream(seed, TAG_FEATURES, 1);
        let w1 = Tensor::randn(&[dim, 3, 3, 3], (2.0 / 27.0f32).sqrt(), &mut rng);
        let w2 = Tensor::randn(&[dim, dim, 3, 3], (2.0 / (9 * dim) as f32).sqrt(), &mut rng);
        Self { w1, w2, dim }
    }

    /// (3,H,W) image -> `dim` pooled features.
    pub fn embed(&self, image: &Tensor) -> Result<Vec<f64>, EngineError> {
        let h1 = conv2d_forward(image, &self.w1, None, 2, 1)?;
        let a1 = Tensor::new(
            h1.shape().to_vec(),
            h1.data().iter().map(|&x| if x >= 0.0 { x } else { 0.2 * x }).collect(),
        )?;
        let h2 = conv2d_forward(&a1, &self.w2, None, 2, 1)?;
        let (c, hh, ww) = (h2.shape()[0], h2.shape()[1], h2.shape()[2]);
        let mut out = Vec::with_capacity(c);
        for ci in 0..c {
            let s: f64 = h2.data()[ci * hh * ww..(ci + 1) * hh * ww]
                .iter()
                .map(|&x| f64::from(x))
                .sum();
            out.push(s / (hh * ww) as f64);
        }
        Ok(out)
    }
}

/// Sample mean and (ddof=1) covariance of row vectors.
fn moments(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len();
    let d = samples[0].len();
    let mut mu = vec![0.0f64; d];
    for s in samples {
        for (m, v) in mu.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for s in samples {
        for i in 0..d {
            let di = s[i] - mu[i];
            for j in 0..d {
                cov[i * d + j] += di * (s[j] - mu[j]);
            }
        }
    }
    let denom = (n - 1).max(1) as f64;
    for v in &mut cov {
        *v /= denom;
    }
    (mu, cov)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, row-major eigenvector matrix V with rows = eigenvectors).
fn jacobi_eigh(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                off += m[i * d + j] * m[i * d + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-30 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vpk = v[p * d + k];
                    let vqk = v[q * d + k];
                    v[p * d + k] = c * vpk - s * vqk;
                    v[q * d + k] = s * vpk + c * vqk;
                }
            }
        }
    }
    let eig = (0..d).map(|i| m[i * d + i]).collect();
    (eig, v)
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; d * d];
    for i in 0..d {
        for k in 0..d {
            let av = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += av * b[k * d + j];
            }
        }
    }
    out
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition;
/// tiny negative eigenvalues from roundoff are clamped to zero.
fn sqrtm_psd(a: &[f64], d: usize) -> Vec<f64> {
    let (eig, v) = jacobi_eigh(a, d);
    // sqrt(A) = V^T diag(sqrt(eig)) V with rows of V the eigenvectors.
    let mut out = vec![0.0f64; d * d];
    for (k, &lam) in eig.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] += s * v[k * d + i] * v[k * d + j];
            }
        }
    }
    out
}

/// Frechet distance between Gaussian fits of two feature-vector sets:
/// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}).
pub fn frechet_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, EngineError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EngineError::Invalid("need at least 2 samples per side".into()));
    }
    let d = a[0].len();
    if b[0].len() != d {
        return Err(EngineError::ShapeMismatch {
            op: "frechet",
            detail: format!("feature dims {} vs {}", d, b[0].len()),
        });
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();

    // Tr((Sa Sb)^{1/2}) via the symmetric form sqrt(Sa)^T Sb sqrt(Sa).
    let sqrt_a = sqrtm_psd(&cov_a, d);
    let inner = matmul_sq(&matmul_sq(&sqrt_a, &cov_b, d), &sqrt_a, d);
    let (eig, _) = jacobi_eigh(&inner, d);
    let tr_sqrt: f64 = eig.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let tr_a: f64 = (0..d).map(|i| cov_a[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| cov_b[i * d + i]).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0))
}

/// Frechet proxy distance between two image sets (>= 64 per side), using
/// the fixed random-feature embedder.
pub fn feature_frechet(
    images_a: &[Tensor],
    images_b: &[Tensor],
    embedder: &FeatureEmbedder,
) -> Result<f64, EngineError> {
    if images_a.len() < 64 || images_b.len() < 64 {
        return Err(EngineError::Invalid(format!(
            "feature_frechet needs >= 64 samples per side, got {} and {}",
            images_a.len(),
            images_b.len()
        )));
    }
    let fa: Result<Vec<_>, _> = images_a.iter().map(|t| embedder.embed(t)).collect();
    let fb: Result<Vec<_>, _> = images_b.iter().map(|t| embedder.embed(t)).collect();
    frechet_from_features(&fa?, &fb?)
}
