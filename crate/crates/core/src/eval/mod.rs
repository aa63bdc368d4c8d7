//! Sample-quality metrics: FID on a pluggable feature extractor, FID after
//! Gaussian blurring, an Inception-Score analogue and conditional accuracy
//! measured by an attribute probe.

mod probe;

pub use probe::{
    conditional_accuracy, train_probe, AttributeProbe, CondAccReport, ConditionalGenerator, ProbeTrainConfig,
    ProbeTrainReport,
};

use crate::error::{ensure_dim, Error, Result};
use crate::features::PixelEncoder;
use crate::nn::Mat;
use crate::raster::{Image, CHANNELS};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Eigenvalues below `-EIG_TOL * max(1, largest)` make a covariance
/// indefinite; smaller negative values are clipped to zero.
pub const EIG_TOL: f64 = 1e-6;
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Mean and (unbiased) covariance of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn d(&self) -> usize {
        self.mean.len()
    }

    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        ensure_dim(d * d, cov.len())?;
        let s = Self { mean, cov };
        s.check_symmetric()?;
        Ok(s)
    }

    fn check_symmetric(&self) -> Result<()> {
        let d = self.d();
        for i in 0..d {
            for j in 0..i {
                if (self.cov[i * d + j] - self.cov[j * d + i]).abs() > SYMMETRY_TOL {
                    return Err(Error::Numerical(format!("covariance is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    /// Two-pass reference estimate over the rows of `x`.
    pub fn from_rows(x: &Mat<f64>) -> Result<Self> {
        if x.rows < 2 {
            return Err(Error::Data(format!("need at least 2 samples for a covariance, got {}", x.rows)));
        }
        let (n, d) = (x.rows, x.cols);
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for i in 0..n {
            let r = x.row(i);
            for a in 0..d {
                let da = r[a] - mean[a];
                for b in 0..=a {
                    cov[a * d + b] += da * (r[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..=a {
                let v = cov[a * d + b] / (n - 1) as f64;
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
        }
        Ok(Self { mean, cov })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d(), self.d(), &self.cov)
    }
}

/// Streaming mean/covariance (Welford updates with Chan merging), so chunks
/// can be accumulated independently and combined.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsAccumulator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(d: usize) -> Self {
        Self { n: 0, mean: vec![0.0; d], m2: vec![0.0; d * d] }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        let d = self.mean.len();
        ensure_dim(d, x.len())?;
        self.n += 1;
        let inv = 1.0 / self.n as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        self.mean.iter_mut().zip(&delta).for_each(|(m, dl)| *m += dl * inv);
        for a in 0..d {
            let post = x[a] - self.mean[a];
            for b in 0..d {
                self.m2[a * d + b] += delta[b] * post;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &StatsAccumulator) -> Result<()> {
        let d = self.mean.len();
        ensure_dim(d, other.mean.len())?;
        if other.n == 0 {
            return Ok(());
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for a in 0..d {
            for b in 0..d {
                self.m2[a * d + b] += other.m2[a * d + b] + delta[a] * delta[b] * na * nb / n;
            }
        }
        self.mean.iter_mut().zip(&delta).for_each(|(m, dl)| *m += dl * nb / n);
        self.n += other.n;
        Ok(())
    }

    pub fn finish(&self) -> Result<GaussianStats> {
        if self.n < 2 {
            return Err(Error::Data(format!("need at least 2 samples for a covariance, got {}", self.n)));
        }
        let d = self.mean.len();
        let mut cov = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..=a {
                let v = 0.5 * (self.m2[a * d + b] + self.m2[b * d + a]) / (self.n - 1) as f64;
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
        }
        Ok(GaussianStats { mean: self.mean.clone(), cov })
    }
}

/// Symmetric PSD square root with clipping of slightly negative eigenvalues.
fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let eig = SymmetricEigen::new(m);
    let top = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&v| v < -EIG_TOL * top) {
        return Err(Error::Numerical(format!("{what} is indefinite (eigenvalue {bad:e})")));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let sqrt = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok((sqrt, roots))
}

/// Frechet distance between two Gaussians:
/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The cross term uses `Tr((S_a S_b)^(1/2)) = Tr((A S_b A)^(1/2))` with
/// `A = S_a^(1/2)`, which keeps every decomposition symmetric.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    ensure_dim(a.d(), b.d())?;
    a.check_symmetric()?;
    b.check_symmetric()?;
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let (root_a, _) = psd_sqrt(sa.clone(), "first covariance")?;
    psd_sqrt(sb.clone(), "second covariance")?;
    let mut m = &root_a * &sb * &root_a;
    m = (&m + m.transpose()) * 0.5;
    let (_, roots) = psd_sqrt(m, "covariance product")?;
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * roots.sum();
    Ok(value.max(0.0))
}

/// Maps image sets to feature rows for FID.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, images: &[&Image]) -> Result<Mat<f64>>;
}

/// Penultimate activations of a trained pixel encoder.
impl FeatureExtractor for PixelEncoder<f32> {
    fn dim(&self) -> usize {
        self.penultimate_dim()
    }

    fn extract(&self, images: &[&Image]) -> Result<Mat<f64>> {
        self.penultimate_features(images)
    }
}

/// Gaussian sigma per unit of blur radius.
pub const BLUR_SIGMA_PER_RADIUS: f64 = 0.5;

/// Normalized 1-D Gaussian taps for blur radius `k` (`sigma = k / 2`,
/// `2k + 1` taps).
pub fn blur_kernel(k: usize) -> Vec<f64> {
    if k == 0 {
        return vec![1.0];
    }
    let sigma = k as f64 * BLUR_SIGMA_PER_RADIUS;
    let taps: Vec<f64> = (0..=2 * k)
        .map(|i| {
            let x = i as f64 - k as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian blur with replicated borders; `k = 0` returns the
/// image unchanged.
pub fn gaussian_blur(image: &Image, k: usize) -> Image {
    if k == 0 {
        return image.clone();
    }
    let taps = blur_kernel(k);
    let n = image.side;
    let at = |v: isize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f64; image.pixels.len()];
    for y in 0..n {
        for x in 0..n {
            for c in 0..CHANNELS {
                tmp[(y * n + x) * CHANNELS + c] = taps
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * image.pixels[(y * n + at(x as isize + t as isize - k as isize)) * CHANNELS + c] as f64)
                    .sum();
            }
        }
    }
    let mut out = image.clone();
    for y in 0..n {
        for x in 0..n {
            for c in 0..CHANNELS {
                let v: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * tmp[(at(y as isize + t as isize - k as isize) * n + x) * CHANNELS + c])
                    .sum();
                out.pixels[(y * n + x) * CHANNELS + c] = v as f32;
            }
        }
    }
    out
}

pub fn image_stats(images: &[&Image], extractor: &dyn FeatureExtractor) -> Result<GaussianStats> {
    if images.is_empty() {
        return Err(Error::Data("empty image set".into()));
    }
    GaussianStats::from_rows(&extractor.extract(images)?)
}

/// FID between two image sets under `extractor`.
pub fn fid_images(a: &[&Image], b: &[&Image], extractor: &dyn FeatureExtractor) -> Result<f64> {
    fid(&image_stats(a, extractor)?, &image_stats(b, extractor)?)
}

/// FID after blurring both sets with radius `k`.
pub fn fid_k(a: &[&Image], b: &[&Image], k: usize, extractor: &dyn FeatureExtractor) -> Result<f64> {
    if k == 0 {
        return fid_images(a, b, extractor);
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("empty image set".into()));
    }
    let ba: Vec<Image> = a.iter().map(|i| gaussian_blur(i, k)).collect();
    let bb: Vec<Image> = b.iter().map(|i| gaussian_blur(i, k)).collect();
    let ra: Vec<&Image> = ba.iter().collect();
    let rb: Vec<&Image> = bb.iter().collect();
    fid_images(&ra, &rb, extractor)
}

pub const SIMPLEX_TOL: f64 = 1e-4;

/// Inception Score over class posteriors (one row per image): per split,
/// `exp(mean_x KL(p(y|x) || p(y)))`; returns mean and population standard
/// deviation across splits.
pub fn inception_score(probs: &Mat<f64>, splits: usize) -> Result<(f64, f64)> {
    if splits == 0 {
        return Err(Error::Config("splits must be >= 1".into()));
    }
    if probs.rows < splits {
        return Err(Error::Data(format!("{} samples cannot fill {splits} splits", probs.rows)));
    }
    for i in 0..probs.rows {
        let r = probs.row(i);
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL || r.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Data(format!("row {i} is not a probability vector (sum {s})")));
        }
    }
    let n = probs.rows;
    let c = probs.cols;
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let (lo, hi) = (s * n / splits, (s + 1) * n / splits);
        let m = (hi - lo) as f64;
        let mut marginal = vec![0.0; c];
        for i in lo..hi {
            marginal.iter_mut().zip(probs.row(i)).for_each(|(a, p)| *a += p / m);
        }
        let mut kl = 0.0;
        for i in lo..hi {
            for (p, q) in probs.row(i).iter().zip(&marginal) {
                if *p > 0.0 {
                    kl += p * (p.ln() - q.ln());
                }
            }
        }
        scores.push((kl / m).exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn identity_stats(mean: Vec<f64>) -> GaussianStats {
        let d = mean.len();
        let mut cov = vec![0.0; d * d];
        (0..d).for_each(|i| cov[i * d + i] = 1.0);
        GaussianStats::new(mean, cov).unwrap()
    }

    #[test]
    fn fid_of_shifted_identity_gaussians() {
        let a = identity_stats(vec![0.0; 5]);
        let b = identity_stats(vec![2.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((fid(&a, &b).unwrap() - 4.0).abs() < 1e-6);
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let a = identity_stats(vec![0.0; 2]);
        let b = GaussianStats::new(vec![0.0; 2], vec![1.0, 0.0, 0.0, -0.5]).unwrap();
        assert!(matches!(fid(&a, &b), Err(Error::Numerical(_))));
        assert!(GaussianStats::new(vec![0.0; 2], vec![1.0, 0.3, 0.1, 1.0]).is_err());
    }

    #[test]
    fn streaming_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Mat::<f64>::randn(300, 6, &mut rng);
        let serial = GaussianStats::from_rows(&x).unwrap();
        let mut left = StatsAccumulator::new(6);
        let mut right = StatsAccumulator::new(6);
        for i in 0..x.rows {
            if i < 113 { left.push(x.row(i)).unwrap() } else { right.push(x.row(i)).unwrap() }
        }
        left.merge(&right).unwrap();
        let streamed = left.finish().unwrap();
        for (a, b) in serial.mean.iter().zip(&streamed.mean).chain(serial.cov.iter().zip(&streamed.cov)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        for k in [1, 2, 4, 8] {
            let taps = blur_kernel(k);
            assert_eq!(taps.len(), 2 * k + 1);
            assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let img = Image::filled(8, 0.25);
        let out = gaussian_blur(&img, 3);
        assert!(out.pixels.iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert_eq!(gaussian_blur(&img, 0), img);
    }

    #[test]
    fn inception_score_limits() {
        let uniform = Mat::from_vec(20, 4, vec![0.25; 80]);
        let (m, s) = inception_score(&uniform, 2).unwrap();
        assert!((m - 1.0).abs() < 1e-12 && s.abs() < 1e-12);
        let mut onehot = Mat::zeros(20, 4);
        (0..20).for_each(|i| onehot.data[i * 4 + i % 4] = 1.0);
        let (m, _) = inception_score(&onehot, 1).unwrap();
        assert!((m - 4.0).abs() < 1e-12);
        let bad = Mat::from_vec(1, 2, vec![0.7, 0.7]);
        assert!(matches!(inception_score(&bad, 1), Err(Error::Data(_))));
    }

    #[test]
    fn fid_is_symmetric_on_random_spd_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let mk = |rng: &mut ChaCha8Rng| {
                let x = Mat::<f64>::randn(40, 5, rng);
                let mut s = GaussianStats::from_rows(&x).unwrap();
                for m in s.mean.iter_mut() {
                    let v: f64 = StandardNormal.sample(&mut *rng);
                    *m += v;
                }
                s
            };
            let (a, b) = (mk(&mut rng), mk(&mut rng));
            let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
            assert!((ab - ba).abs() < 1e-8 * ab.max(1.0), "{ab} vs {ba}");
        }
    }
}
