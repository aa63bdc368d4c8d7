//! Pseudo text features generated from image features.
//!
//! Fixed perturbations add isotropic Gaussian noise scaled to `xi * |f|`;
//! trainable perturbations use a learned mean offset and log standard
//! deviation (see [`InferenceModel`]).

mod inference;
pub mod theorem;

pub use inference::{
    train_inference_model, InferenceCache, InferenceModel, InferenceTrainConfig, InferenceTrainReport,
    LOG_STD_MAX, LOG_STD_MIN,
};
pub use theorem::{
    calibrate_density, inner_product_cdf, inner_product_tail, pointwise_lower_bound, theorem1_bound,
    theorem1_mc_check, BoundQuery, Calibration, DensityConvention, McCheck,
};

use crate::error::{ensure_dim, Error, Result};
use crate::features::{l2, normalize, FeatureVector, UnitFeature};
use crate::nn::{Mat, Real};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPerturbSpec {
    pub xi: f64,
}

impl Default for FixedPerturbSpec {
    fn default() -> Self {
        Self { xi: 0.1 }
    }
}

impl FixedPerturbSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(Error::Config(format!("xi must be >= 0, got {}", self.xi)));
        }
        Ok(())
    }
}

/// How pseudo text features are produced during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PseudoTextSpec {
    Fixed(FixedPerturbSpec),
    /// Inference model loaded from a checkpoint archive.
    Trainable { checkpoint: String },
}

/// Unnormalized fixed perturbation `f + xi * eps * |f| / |eps|`.
pub fn perturb_fixed(f: &FeatureVector, spec: &FixedPerturbSpec, eps: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    ensure_dim(f.d(), eps.len())?;
    let nf = f.norm();
    if !(nf > 0.0) {
        return Err(Error::Normalization);
    }
    if spec.xi == 0.0 {
        return Ok(f.values.clone());
    }
    let ne = l2(eps);
    if !(ne > 0.0) {
        return Err(Error::DegenerateNoise);
    }
    let s = spec.xi * nf / ne;
    Ok(f.values.iter().zip(eps).map(|(a, e)| a + s * e).collect())
}

/// Fixed-perturbation pseudo text feature, unit-normalized.
pub fn pseudo_fixed(f: &FeatureVector, spec: &FixedPerturbSpec, eps: &[f64]) -> Result<UnitFeature> {
    let h = perturb_fixed(f, spec, eps)?;
    normalize(&FeatureVector::new(h)?)
}

/// Trainable pseudo text feature `normalize(f + r1(f) + eps * exp(r2(f)))`.
pub fn pseudo_trainable<R: Real>(f: &FeatureVector, m: &InferenceModel<R>, eps: &[f64]) -> Result<UnitFeature> {
    ensure_dim(m.d(), f.d())?;
    ensure_dim(m.d(), eps.len())?;
    let fm = Mat::from_rows(&[&f.values]);
    let em = Mat::from_rows(&[eps]);
    let (h, _) = m.forward(&fm, &em)?;
    UnitFeature::new(h.row_f64(0))
}

/// Draw `d` standard normals, redrawing the (measure-zero) all-zero case.
pub fn sample_noise(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        if l2(&e) > 0.0 {
            return e;
        }
    }
}

/// Row-wise [`pseudo_fixed`] over a batch, returned as unit rows.
pub fn pseudo_fixed_batch<R: Real>(feats: &Mat<R>, spec: &FixedPerturbSpec, eps: &Mat<R>) -> Result<Mat<R>> {
    ensure_dim(feats.cols, eps.cols)?;
    ensure_dim(feats.rows, eps.rows)?;
    let mut out = Mat::zeros(feats.rows, feats.cols);
    for i in 0..feats.rows {
        let f = FeatureVector::new(feats.row_f64(i))?;
        let h = pseudo_fixed(&f, spec, &eps.row_f64(i))?;
        for (o, &v) in out.row_mut(i).iter_mut().zip(h.values()) {
            *o = R::lit(v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::cosine_sim;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_xi_is_plain_normalization() {
        let f = fv(&[3.0, -4.0, 12.0]);
        let h = pseudo_fixed(&f, &FixedPerturbSpec { xi: 0.0 }, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(h, normalize(&f).unwrap());
    }

    #[test]
    fn parallel_noise_keeps_direction() {
        for xi in [0.1, 1.0, 7.5] {
            let h = pseudo_fixed(&fv(&[1.0, 0.0]), &FixedPerturbSpec { xi }, &[1.0, 0.0]).unwrap();
            assert_eq!(h.values(), &[1.0, 0.0]);
        }
    }

    #[test]
    fn orthogonal_noise_example() {
        let f = fv(&[1.0, 0.0]);
        let raw = perturb_fixed(&f, &FixedPerturbSpec { xi: 1.0 }, &[0.0, 2.0]).unwrap();
        assert_eq!(raw, vec![1.0, 1.0]);
        let h = pseudo_fixed(&f, &FixedPerturbSpec { xi: 1.0 }, &[0.0, 2.0]).unwrap();
        let r = 0.5f64.sqrt();
        assert!((h.values()[0] - r).abs() < 1e-15 && (h.values()[1] - r).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs() {
        let spec = FixedPerturbSpec { xi: 0.5 };
        assert!(matches!(pseudo_fixed(&fv(&[0.0, 0.0]), &spec, &[1.0, 0.0]), Err(Error::Normalization)));
        assert!(matches!(pseudo_fixed(&fv(&[1.0, 0.0]), &spec, &[0.0, 0.0]), Err(Error::DegenerateNoise)));
        assert!(matches!(pseudo_fixed(&fv(&[1.0, 0.0]), &spec, &[1.0]), Err(Error::Dimension { .. })));
        assert!(pseudo_fixed(&fv(&[1.0]), &FixedPerturbSpec { xi: -0.1 }, &[1.0]).is_err());
    }

    #[test]
    fn pointwise_bound_holds_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in 0..10_000 {
            let d = 2 + t % 30;
            let xi = 0.05 + (t % 7) as f64 * 0.15;
            let f = fv(&sample_noise(d, &mut rng));
            let eps = sample_noise(d, &mut rng);
            let h = pseudo_fixed(&f, &FixedPerturbSpec { xi }, &eps).unwrap();
            let sim = cosine_sim(&f, &h.as_feature()).unwrap();
            let ab = cosine_sim(&f, &fv(&eps)).unwrap();
            assert!(sim >= pointwise_lower_bound(ab, xi) - 1e-12, "t={t}");
        }
    }

    proptest! {
        #[test]
        fn perturbation_has_exact_magnitude(
            f in prop::collection::vec(-5.0f64..5.0, 2..64),
            seed in any::<u64>(),
            xi in 0.0f64..3.0,
        ) {
            prop_assume!(l2(&f) > 1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps = sample_noise(f.len(), &mut rng);
            let fvec = fv(&f);
            let raw = perturb_fixed(&fvec, &FixedPerturbSpec { xi }, &eps).unwrap();
            let diff: Vec<f64> = raw.iter().zip(&f).map(|(a, b)| a - b).collect();
            let want = xi * l2(&f);
            prop_assert!((l2(&diff) - want).abs() <= 1e-6 * want.max(1e-12));
            let h = pseudo_fixed(&fvec, &FixedPerturbSpec { xi }, &eps);
            if let Ok(h) = h {
                prop_assert!((l2(h.values()) - 1.0).abs() <= 1e-6);
            }
        }
    }
}
