use super::GanConfig;
use crate::error::{ensure_dim, Result};
use crate::features::UnitFeature;
use crate::nn::{
    modulate, modulate_backward, prefixed, prefixed_mut, upsample2x, upsample2x_backward, Act, Conv2d, ConvCache,
    Linear, Maps, Mat, Mlp, MlpCache, Module, Param, Real,
};
use crate::raster::{maps_to_images, Image, CHANNELS};
use rand::Rng;

/// Per-layer transforms: style affine `w -> s`, condition net `h -> c`
/// (2 FC layers) and the fusion affine `[s, c] -> u`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleLayer<R> {
    pub s_affine: Linear<R>,
    pub cond: Mlp<R>,
    pub u_affine: Linear<R>,
    pub conv: Conv2d<R>,
}

impl<R: Real> StyleLayer<R> {
    pub fn channels(&self) -> usize {
        self.conv.c_out()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet<R> {
    pub config: GanConfig,
    pub mapping: Mlp<R>,
    pub constant: Param<R>,
    pub layers: Vec<StyleLayer<R>>,
    pub to_rgb: Conv2d<R>,
}

/// Style codes of a batch: unconditional `s`, condition `c` and fused
/// conditional codes `u` for every layer (rows index the batch).
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCodes<R> {
    pub s: Vec<Mat<R>>,
    pub c: Vec<Mat<R>>,
    pub u: Vec<Mat<R>>,
}

impl<R: Real> StyleCodes<R> {
    /// Total conditional-code width across layers.
    pub fn u_len(&self) -> usize {
        self.u.iter().map(|u| u.cols).sum()
    }
}

pub struct CodesCache<R> {
    mapping: MlpCache<R>,
    cond: Vec<MlpCache<R>>,
    su: Vec<Mat<R>>,
}

pub struct SynthCache<R> {
    u: Vec<Mat<R>>,
    conv: Vec<ConvCache<R>>,
    pre_mod: Vec<Maps<R>>,
    act: Vec<Maps<R>>,
    rgb: ConvCache<R>,
    out: Maps<R>,
}

pub struct GenCache<R> {
    codes: CodesCache<R>,
    synth: SynthCache<R>,
}

impl<R: Real> GenCache<R> {
    pub fn image(&self) -> &Maps<R> {
        &self.synth.out
    }
}

impl<R: Real> GeneratorNet<R> {
    pub fn new(config: &GanConfig, rng: &mut impl Rng) -> Self {
        let mut widths = vec![config.z_dim];
        widths.extend(std::iter::repeat_n(config.w_dim, config.mapping_layers));
        let mapping = Mlp::new(&widths, Act::Leaky, Act::Leaky, rng);
        let c0 = config.g_channels[0];
        let constant = Param::normal(vec![c0, config.base * config.base], 1.0, rng);
        let mut prev = c0;
        let layers = config
            .g_channels
            .iter()
            .map(|&ch| {
                let s_affine = Linear::new(config.w_dim, ch, 1.0, rng);
                let cond = Mlp::new(&[config.d, config.cond_hidden, ch], Act::Leaky, Act::Identity, rng);
                let mut u_affine = Linear::new(2 * ch, 2 * ch, config.u_gain, rng);
                u_affine.bias.value.iter_mut().for_each(|b| *b = R::zero());
                let conv = Conv2d::new(prev, ch, 3, 1, 1, Act::Leaky.gain(), rng);
                prev = ch;
                StyleLayer { s_affine, cond, u_affine, conv }
            })
            .collect();
        let to_rgb = Conv2d::new(prev, CHANNELS, 1, 1, 0, 1.0, rng);
        Self { config: config.clone(), mapping, constant, layers, to_rgb }
    }

    /// Width of each layer's conditional code (`2 * channels`: scale, shift).
    pub fn u_layout(&self) -> Vec<usize> {
        self.layers.iter().map(|l| 2 * l.channels()).collect()
    }

    pub fn out_side(&self) -> usize {
        self.config.base << (self.layers.len() - 1)
    }

    pub fn style_codes(&self, z: &Mat<R>, h: &Mat<R>) -> Result<(StyleCodes<R>, CodesCache<R>)> {
        ensure_dim(self.config.z_dim, z.cols)?;
        ensure_dim(self.config.d, h.cols)?;
        ensure_dim(z.rows, h.rows)?;
        let mapping = self.mapping.forward(z);
        let w = mapping.output();
        let mut codes = StyleCodes { s: vec![], c: vec![], u: vec![] };
        let mut cond = Vec::with_capacity(self.layers.len());
        let mut su = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let s = layer.s_affine.forward(w);
            let cc = layer.cond.forward(h);
            let c = cc.output().clone();
            let cat = s.hcat(&c);
            let u = layer.u_affine.forward(&cat);
            codes.s.push(s);
            codes.c.push(c);
            codes.u.push(u);
            cond.push(cc);
            su.push(cat);
        }
        Ok((codes, CodesCache { mapping, cond, su }))
    }

    /// Run the synthesis stack from per-layer conditional codes.
    pub fn synthesize(&self, u: &[Mat<R>]) -> Result<(Maps<R>, SynthCache<R>)> {
        ensure_dim(self.layers.len(), u.len())?;
        let b = u[0].rows;
        for (layer, ul) in self.layers.iter().zip(u) {
            ensure_dim(2 * layer.channels(), ul.cols)?;
            ensure_dim(b, ul.rows)?;
        }
        let base = self.config.base;
        let c0 = self.constant.shape[0];
        let mut x = Maps::zeros(c0, b, base, base);
        for c in 0..c0 {
            let src = &self.constant.value[c * base * base..(c + 1) * base * base];
            for bi in 0..b {
                let off = x.offset(c, bi);
                x.data[off..off + base * base].copy_from_slice(src);
            }
        }
        let mut conv = Vec::with_capacity(self.layers.len());
        let mut pre_mod = Vec::with_capacity(self.layers.len());
        let mut act = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = upsample2x(&x);
            }
            let (y, cc) = layer.conv.forward(&x);
            let mut m = modulate(&y, &u[i]);
            Act::Leaky.apply(&mut m.data);
            conv.push(cc);
            pre_mod.push(y);
            act.push(m.clone());
            x = m;
        }
        let (mut out, rgb) = self.to_rgb.forward(&x);
        Act::Tanh.apply(&mut out.data);
        let cache = SynthCache { u: u.to_vec(), conv, pre_mod, act, rgb, out: out.clone() };
        Ok((out, cache))
    }

    pub fn forward(&self, z: &Mat<R>, h: &Mat<R>) -> Result<(Maps<R>, GenCache<R>)> {
        let (codes, cc) = self.style_codes(z, h)?;
        let (img, sc) = self.synthesize(&codes.u)?;
        Ok((img, GenCache { codes: cc, synth: sc }))
    }

    /// Gradients of the synthesis stack; returns `d loss / d u` per layer.
    pub fn synthesize_backward(&mut self, cache: &SynthCache<R>, dimg: &Maps<R>, grads: bool) -> Vec<Mat<R>> {
        let mut g = dimg.clone();
        Act::Tanh.backward(&cache.out.data, &mut g.data);
        let mut g = self.to_rgb.backward(&cache.rgb, &g, grads, true).expect("dx requested");
        let n = self.layers.len();
        let mut du = vec![Mat::zeros(0, 0); n];
        for i in (0..n).rev() {
            Act::Leaky.backward(&cache.act[i].data, &mut g.data);
            let (dy, dui) = modulate_backward(&cache.pre_mod[i], &cache.u[i], &g);
            du[i] = dui;
            let need_dx = i > 0 || grads;
            let dx = self.layers[i].conv.backward(&cache.conv[i], &dy, grads, need_dx);
            match dx {
                Some(dx) if i > 0 => g = upsample2x_backward(&dx),
                Some(dx) => {
                    if grads {
                        let plane = self.config.base * self.config.base;
                        for c in 0..dx.c {
                            for bi in 0..dx.b {
                                let off = dx.offset(c, bi);
                                let dst = &mut self.constant.grad[c * plane..(c + 1) * plane];
                                dst.iter_mut().zip(&dx.data[off..off + plane]).for_each(|(a, &v)| *a += v);
                            }
                        }
                    }
                }
                None => {}
            }
        }
        du
    }

    /// Backpropagate `d loss / d image` into every generator parameter.
    pub fn backward(&mut self, cache: &GenCache<R>, dimg: &Maps<R>) {
        let du = self.synthesize_backward(&cache.synth, dimg, true);
        self.codes_backward(&cache.codes, &du);
    }

    pub fn codes_backward(&mut self, cache: &CodesCache<R>, du: &[Mat<R>]) {
        let w = cache.mapping.output();
        let mut dw = Mat::zeros(w.rows, w.cols);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let dcat = layer.u_affine.backward(&cache.su[i], &du[i], true);
            let (ds, dc) = dcat.hsplit(layer.channels());
            dw.add_assign(&layer.s_affine.backward(w, &ds, true));
            layer.cond.backward(&cache.cond[i], &dc, true);
        }
        self.mapping.backward(&cache.mapping, &dw, true);
    }

    /// Images for a batch of latents and unit conditions.
    pub fn generate_batch(&self, z: &Mat<R>, h: &Mat<R>) -> Result<Vec<Image>> {
        let (img, _) = self.forward(z, h)?;
        Ok(maps_to_images(&img))
    }

    pub fn generate(&self, h: &UnitFeature, z: &[f64]) -> Result<Image> {
        let zm = Mat::from_rows(&[z]);
        let hm = Mat::from_rows(&[h.values()]);
        Ok(self.generate_batch(&zm, &hm)?.remove(0))
    }
}

impl<R: Real> Module<R> for GeneratorNet<R> {
    fn params(&self) -> Vec<(String, &Param<R>)> {
        let mut v: Vec<(String, &Param<R>)> = prefixed("mapping", self.mapping.params()).collect();
        v.push(("const".into(), &self.constant));
        for (i, l) in self.layers.iter().enumerate() {
            v.extend(prefixed(&format!("layer{i}.s_affine"), l.s_affine.params()));
            v.extend(prefixed(&format!("layer{i}.cond"), l.cond.params()));
            v.extend(prefixed(&format!("layer{i}.u_affine"), l.u_affine.params()));
            v.extend(prefixed(&format!("layer{i}.conv"), l.conv.params()));
        }
        v.extend(prefixed("to_rgb", self.to_rgb.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        let mut v: Vec<(String, &mut Param<R>)> = prefixed_mut("mapping", self.mapping.params_mut()).collect();
        v.push(("const".into(), &mut self.constant));
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("layer{i}.s_affine"), l.s_affine.params_mut()));
            v.extend(prefixed_mut(&format!("layer{i}.cond"), l.cond.params_mut()));
            v.extend(prefixed_mut(&format!("layer{i}.u_affine"), l.u_affine.params_mut()));
            v.extend(prefixed_mut(&format!("layer{i}.conv"), l.conv.params_mut()));
        }
        v.extend(prefixed_mut("to_rgb", self.to_rgb.params_mut()));
        v
    }
}
