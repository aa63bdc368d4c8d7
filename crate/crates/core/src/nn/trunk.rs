use super::layers::{global_avg_pool, global_avg_pool_backward, Act, Conv2d, ConvCache};
use super::tensor::{prefixed, prefixed_mut, Maps, Mat, Module, Param};
use super::Real;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One 3x3 convolution stage of a [`ConvTrunk`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub channels: usize,
    pub stride: usize,
}

/// Stack of 3x3 convolutions with leaky activations followed by global
/// average pooling. Shared by the discriminator backbone, the pixel image
/// encoder and the attribute probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTrunk<R> {
    pub convs: Vec<Conv2d<R>>,
}

#[derive(Clone, Debug)]
pub struct TrunkCache<R> {
    convs: Vec<ConvCache<R>>,
    acts: Vec<Maps<R>>,
}

impl<R: Real> ConvTrunk<R> {
    pub fn new(c_in: usize, stages: &[Stage], rng: &mut impl Rng) -> Self {
        let mut prev = c_in;
        let convs = stages
            .iter()
            .map(|s| {
                let conv = Conv2d::new(prev, s.channels, 3, s.stride, 1, Act::Leaky.gain(), rng);
                prev = s.channels;
                conv
            })
            .collect();
        Self { convs }
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map(|c| c.c_out()).unwrap_or(0)
    }

    pub fn forward(&self, x: &Maps<R>) -> (Mat<R>, TrunkCache<R>) {
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut acts: Vec<Maps<R>> = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let input = acts.last().unwrap_or(x);
            let (mut y, cache) = conv.forward(input);
            Act::Leaky.apply(&mut y.data);
            caches.push(cache);
            acts.push(y);
        }
        let pooled = global_avg_pool(acts.last().unwrap_or(x));
        (pooled, TrunkCache { convs: caches, acts })
    }

    pub fn backward(&mut self, cache: &TrunkCache<R>, dpooled: &Mat<R>, grads: bool, need_dx: bool) -> Option<Maps<R>> {
        let last = cache.acts.last().expect("trunk has stages");
        let mut g = global_avg_pool_backward(dpooled, (last.c, last.b, last.h, last.w));
        for i in (0..self.convs.len()).rev() {
            Act::Leaky.backward(&cache.acts[i].data, &mut g.data);
            let want_dx = need_dx || i > 0;
            match self.convs[i].backward(&cache.convs[i], &g, grads, want_dx) {
                Some(dx) => g = dx,
                None => return None,
            }
        }
        Some(g)
    }
}

impl<R: Real> Module<R> for ConvTrunk<R> {
    fn params(&self) -> Vec<(String, &Param<R>)> {
        self.convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| prefixed(&format!("conv{i}"), c.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        self.convs
            .iter_mut()
            .enumerate()
            .flat_map(|(i, c)| prefixed_mut(&format!("conv{i}"), c.params_mut()))
            .collect()
    }
}
