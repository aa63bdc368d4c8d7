use super::GanConfig;
use crate::error::{ensure_dim, Error, Result};
use crate::features::{FeatureVector, UnitFeature};
use crate::nn::{prefixed, prefixed_mut, ConvTrunk, Linear, Maps, Mat, Module, Param, Real, TrunkCache};
use crate::raster::{Image, CHANNELS};
use rand::Rng;

/// Shared convolutional backbone with an unconditional score head `f_d`
/// and a feature head `f_s`; the conditional logit is
/// `f_d(x) + <h, f_s(x)>`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorNet<R> {
    pub config: GanConfig,
    pub trunk: ConvTrunk<R>,
    pub head_fd: Linear<R>,
    pub head_fs: Linear<R>,
}

/// Per-sample discriminator outputs of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscOut<R> {
    pub logit: Vec<f64>,
    pub fd: Vec<f64>,
    pub fs: Mat<R>,
}

pub struct DiscCache<R> {
    trunk: TrunkCache<R>,
    pooled: Mat<R>,
    h: Mat<R>,
}

impl<R: Real> DiscriminatorNet<R> {
    pub fn new(config: &GanConfig, rng: &mut impl Rng) -> Self {
        let trunk = ConvTrunk::new(CHANNELS, &config.d_stages, rng);
        let c = trunk.out_channels();
        Self {
            config: config.clone(),
            trunk,
            head_fd: Linear::new(c, 1, 1.0, rng),
            head_fs: Linear::new(c, config.d, 1.0, rng),
        }
    }

    pub fn forward(&self, x: &Maps<R>, h: &Mat<R>) -> Result<(DiscOut<R>, DiscCache<R>)> {
        ensure_dim(CHANNELS, x.c)?;
        ensure_dim(self.config.image_side(), x.h)?;
        ensure_dim(self.config.image_side(), x.w)?;
        ensure_dim(self.config.d, h.cols)?;
        ensure_dim(x.b, h.rows)?;
        let (pooled, trunk) = self.trunk.forward(x);
        let fd_m = self.head_fd.forward(&pooled);
        let fs = self.head_fs.forward(&pooled);
        let fd: Vec<f64> = fd_m.data.iter().map(|v| v.as_f64()).collect();
        let logit = (0..x.b)
            .map(|b| fd[b] + fs.row(b).iter().zip(h.row(b)).map(|(s, c)| s.as_f64() * c.as_f64()).sum::<f64>())
            .collect();
        Ok((DiscOut { logit, fd, fs }, DiscCache { trunk, pooled, h: h.clone() }))
    }

    /// Backpropagate `d loss / d logit` plus an optional direct gradient on
    /// `f_s`. Parameter gradients accumulate when `grads`; the image
    /// gradient is returned when `need_dx`.
    pub fn backward(
        &mut self,
        cache: &DiscCache<R>,
        dlogit: &[f64],
        dfs_extra: Option<&Mat<R>>,
        grads: bool,
        need_dx: bool,
    ) -> Option<Maps<R>> {
        let b = cache.h.rows;
        let dfd = Mat::from_vec(b, 1, dlogit.iter().map(|&v| R::lit(v)).collect());
        let mut dfs = cache.h.clone();
        for i in 0..b {
            let g = R::lit(dlogit[i]);
            dfs.row_mut(i).iter_mut().for_each(|v| *v *= g);
        }
        if let Some(extra) = dfs_extra {
            dfs.add_assign(extra);
        }
        let mut dpooled = self.head_fd.backward(&cache.pooled, &dfd, grads);
        dpooled.add_assign(&self.head_fs.backward(&cache.pooled, &dfs, grads));
        self.trunk.backward(&cache.trunk, &dpooled, grads, need_dx)
    }

    /// Single-image form: `(logit, fd, fs)`.
    pub fn discriminate(&self, x: &Image, h: &UnitFeature) -> Result<(f64, f64, FeatureVector)> {
        if x.side != self.config.image_side() {
            return Err(Error::dim(self.config.image_side(), x.side));
        }
        let hm = Mat::from_rows(&[h.values()]);
        let (out, _) = self.forward(&x.to_maps(), &hm)?;
        Ok((out.logit[0], out.fd[0], FeatureVector::new(out.fs.row_f64(0))?))
    }
}

impl<R: Real> Module<R> for DiscriminatorNet<R> {
    fn params(&self) -> Vec<(String, &Param<R>)> {
        prefixed("trunk", self.trunk.params())
            .chain(prefixed("head_fd", self.head_fd.params()))
            .chain(prefixed("head_fs", self.head_fs.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        prefixed_mut("trunk", self.trunk.params_mut())
            .chain(prefixed_mut("head_fd", self.head_fd.params_mut()))
            .chain(prefixed_mut("head_fs", self.head_fs.params_mut()))
            .collect()
    }
}
