//! Joint multimodal feature space: vectors, encoders, crop-averaged image
//! features and the on-disk feature store.

mod store;
mod trained;

pub use store::{FeatureStore, ManifestRow, STORE_MAGIC, STORE_VERSION};
pub use trained::{
    default_encoder_stages, encoders_from_archive, encoders_to_archive, train_encoder_pair, BowTextEncoder, EncoderTrainConfig, EncoderTrainReport, PixelEncoder, TextTarget,
};

use crate::error::{ensure_dim, Error, Result};
use crate::nn::CropWindow;
use crate::raster::Image;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Unit-norm tolerance for [`UnitFeature`].
pub const UNIT_TOL: f64 = 1e-6;

/// A finite `d`-dimensional vector in the joint feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("feature vector has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn d(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }
}

/// A feature vector of unit L2 norm.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitFeature {
    values: Vec<f64>,
}

impl UnitFeature {
    /// Wrap values that are already unit-norm within [`UNIT_TOL`].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let fv = FeatureVector::new(values)?;
        let n = fv.norm();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Numerical(format!("expected unit norm, got {n}")));
        }
        Ok(Self { values: fv.values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn d(&self) -> usize {
        self.values.len()
    }

    pub fn into_feature(self) -> FeatureVector {
        FeatureVector { values: self.values }
    }

    pub fn as_feature(&self) -> FeatureVector {
        FeatureVector { values: self.values.clone() }
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale `v` to unit norm.
pub fn normalize(v: &FeatureVector) -> Result<UnitFeature> {
    let n = v.norm();
    if !(n > 0.0) {
        return Err(Error::Normalization);
    }
    Ok(UnitFeature { values: v.values.iter().map(|x| x / n).collect() })
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
pub fn cosine_sim(u: &FeatureVector, v: &FeatureVector) -> Result<f64> {
    ensure_dim(u.d(), v.d())?;
    let (nu, nv) = (u.norm(), v.norm());
    if !(nu > 0.0 && nv > 0.0) {
        return Err(Error::Normalization);
    }
    Ok((dot(&u.values, &v.values) / (nu * nv)).clamp(-1.0, 1.0))
}

pub trait ImageEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode_image(&self, image: &Image) -> Result<FeatureVector>;

    fn encode_batch(&self, images: &[Image]) -> Result<Vec<FeatureVector>> {
        images.iter().map(|i| self.encode_image(i)).collect()
    }
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode_text(&self, caption: &str) -> Result<FeatureVector>;
}

/// Image and text encoders that share an output dimension.
#[derive(Clone)]
pub struct EncoderPair {
    pub image: Arc<dyn ImageEncoder>,
    pub text: Arc<dyn TextEncoder>,
}

impl EncoderPair {
    pub fn new(image: Arc<dyn ImageEncoder>, text: Arc<dyn TextEncoder>) -> Result<Self> {
        ensure_dim(image.dim(), text.dim())?;
        Ok(Self { image, text })
    }

    pub fn d(&self) -> usize {
        self.image.dim()
    }
}

impl std::fmt::Debug for EncoderPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderPair").field("d", &self.d()).finish()
    }
}

/// Random-crop augmentation: `k` crops with side drawn uniformly from the
/// integers `[a, w]`, each resized back to `w x w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub k: usize,
    pub a: usize,
    pub w: usize,
}

impl AugmentSpec {
    /// Full-image single crop; equivalent to no augmentation.
    pub fn identity(w: usize) -> Self {
        Self { k: 1, a: w, w }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("crop count k must be >= 1".into()));
        }
        if self.a == 0 || self.a > self.w {
            return Err(Error::Config(format!("crop side a={} must lie in [1, w={}]", self.a, self.w)));
        }
        Ok(())
    }

    /// Draw one crop window: side, then x offset, then y offset.
    pub fn sample_window(&self, rng: &mut impl Rng) -> CropWindow {
        let side = rng.random_range(self.a..=self.w);
        let x0 = rng.random_range(0..=self.w - side);
        let y0 = rng.random_range(0..=self.w - side);
        CropWindow { x0, y0, side }
    }
}

fn check_aug(aug: &AugmentSpec, image: &Image) -> Result<()> {
    aug.validate()?;
    if image.side != aug.w {
        return Err(Error::Config(format!("image side {} does not match augmentation w={}", image.side, aug.w)));
    }
    Ok(())
}

/// Mean encoder output over `k` random crops (raw, not normalized). With no
/// augmentation the encoder output is returned unchanged.
pub fn extract_image_feature(
    image: &Image,
    encoder: &dyn ImageEncoder,
    aug: Option<&AugmentSpec>,
    rng: &mut impl Rng,
) -> Result<FeatureVector> {
    let Some(aug) = aug else {
        return encoder.encode_image(image);
    };
    check_aug(aug, image)?;
    let mut acc = vec![0.0; encoder.dim()];
    for _ in 0..aug.k {
        let crop = image.crop_resize(aug.sample_window(rng), aug.w);
        let f = encoder.encode_image(&crop)?;
        ensure_dim(acc.len(), f.d())?;
        acc.iter_mut().zip(&f.values).for_each(|(a, v)| *a += v);
    }
    let k = aug.k as f64;
    FeatureVector::new(acc.into_iter().map(|v| v / k).collect())
}

/// Batched [`extract_image_feature`]. Windows are drawn image-major in the
/// same order as the per-image function, so results match it exactly.
pub fn extract_image_features(
    images: &[&Image],
    encoder: &dyn ImageEncoder,
    aug: Option<&AugmentSpec>,
    rng: &mut impl Rng,
) -> Result<Vec<FeatureVector>> {
    let Some(aug) = aug else {
        let owned: Vec<Image> = images.iter().map(|&i| i.clone()).collect();
        return encoder.encode_batch(&owned);
    };
    let mut windows = Vec::with_capacity(images.len());
    for img in images {
        check_aug(aug, img)?;
        windows.push((0..aug.k).map(|_| aug.sample_window(rng)).collect::<Vec<_>>());
    }
    let d = encoder.dim();
    let mut acc = vec![vec![0.0; d]; images.len()];
    for j in 0..aug.k {
        let crops: Vec<Image> = images
            .iter()
            .zip(&windows)
            .map(|(img, w)| img.crop_resize(w[j], aug.w))
            .collect();
        for (a, f) in acc.iter_mut().zip(encoder.encode_batch(&crops)?) {
            ensure_dim(d, f.d())?;
            a.iter_mut().zip(&f.values).for_each(|(x, v)| *x += v);
        }
    }
    let k = aug.k as f64;
    acc.into_iter()
        .map(|a| FeatureVector::new(a.into_iter().map(|v| v / k).collect()))
        .collect()
}
