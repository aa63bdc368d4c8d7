use super::GeneratorNet;
use crate::error::{ensure_dim, Error, Result};
use crate::features::UnitFeature;
use crate::nn::{Mat, Real};
use crate::raster::{maps_to_images, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// Independent Bernoulli draw per code element.
    Element,
    /// One draw per generator layer.
    Layer,
}

/// Selector over the concatenated conditional codes of all layers; `true`
/// takes the element from the first condition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixMask {
    pub select_a: Vec<bool>,
}

impl MixMask {
    pub fn all_a(len: usize) -> Self {
        Self { select_a: vec![true; len] }
    }

    pub fn all_b(len: usize) -> Self {
        Self { select_a: vec![false; len] }
    }

    /// `p` is the probability of selecting the first condition.
    pub fn sample(layout: &[usize], p: f64, mode: MixMode, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("mix probability must lie in [0, 1], got {p}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut select_a = Vec::with_capacity(layout.iter().sum());
        for &n in layout {
            match mode {
                MixMode::Element => select_a.extend((0..n).map(|_| rng.random_bool(p))),
                MixMode::Layer => {
                    let pick = rng.random_bool(p);
                    select_a.extend(std::iter::repeat_n(pick, n));
                }
            }
        }
        Ok(Self { select_a })
    }

    pub fn len(&self) -> usize {
        self.select_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.select_a.is_empty()
    }
}

impl<R: Real> GeneratorNet<R> {
    /// Conditional codes for both conditions from the same latent, mixed
    /// elementwise, then synthesized.
    pub fn mix_generate_batch(&self, z: &Mat<R>, ha: &Mat<R>, hb: &Mat<R>, mask: &MixMask) -> Result<Vec<Image>> {
        let total: usize = self.u_layout().iter().sum();
        ensure_dim(total, mask.len())?;
        let (ca, _) = self.style_codes(z, ha)?;
        let (cb, _) = self.style_codes(z, hb)?;
        let mut off = 0;
        let mut u = Vec::with_capacity(ca.u.len());
        for (ua, ub) in ca.u.iter().zip(&cb.u) {
            let mut m = ua.clone();
            for r in 0..m.rows {
                let (ra, rb) = (ua.row(r), ub.row(r));
                for (j, v) in m.row_mut(r).iter_mut().enumerate() {
                    *v = if mask.select_a[off + j] { ra[j] } else { rb[j] };
                }
            }
            off += ua.cols;
            u.push(m);
        }
        let (img, _) = self.synthesize(&u)?;
        Ok(maps_to_images(&img))
    }

    pub fn mix_generate(&self, ha: &UnitFeature, hb: &UnitFeature, z: &[f64], mask: &MixMask) -> Result<Image> {
        let zm = Mat::from_rows(&[z]);
        let a = Mat::from_rows(&[ha.values()]);
        let b = Mat::from_rows(&[hb.values()]);
        Ok(self.mix_generate_batch(&zm, &a, &b, mask)?.remove(0))
    }
}
