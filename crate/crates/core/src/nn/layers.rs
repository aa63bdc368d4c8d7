//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Every `backward` accumulates parameter gradients into `Param::grad` when
//! `grads` is true and returns the gradient with respect to its input.

use super::tensor::{prefixed, prefixed_mut, Maps, Mat, Module, Param};
use super::{gemm, Real};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Act {
    Identity,
    Relu,
    Leaky,
    Tanh,
}

const LEAK: f64 = 0.2;

impl Act {
    pub fn apply<R: Real>(self, v: &mut [R]) {
        match self {
            Act::Identity => {}
            Act::Relu => v.iter_mut().for_each(|x| *x = x.max(R::zero())),
            Act::Leaky => {
                let a = R::lit(LEAK);
                v.iter_mut().for_each(|x| {
                    if *x < R::zero() {
                        *x *= a
                    }
                })
            }
            Act::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
        }
    }

    /// Multiply `dy` in place by the activation derivative, expressed through
    /// the activation's output `y`.
    pub fn backward<R: Real>(self, y: &[R], dy: &mut [R]) {
        debug_assert_eq!(y.len(), dy.len());
        match self {
            Act::Identity => {}
            Act::Relu => dy.iter_mut().zip(y).for_each(|(g, &o)| {
                if o <= R::zero() {
                    *g = R::zero()
                }
            }),
            Act::Leaky => {
                let a = R::lit(LEAK);
                dy.iter_mut().zip(y).for_each(|(g, &o)| {
                    if o < R::zero() {
                        *g *= a
                    }
                })
            }
            Act::Tanh => dy.iter_mut().zip(y).for_each(|(g, &o)| *g *= R::one() - o * o),
        }
    }

    /// He-style init gain for a layer feeding this activation.
    pub fn gain(self) -> f64 {
        match self {
            Act::Relu => 2f64.sqrt(),
            Act::Leaky => (2.0 / (1.0 + LEAK * LEAK)).sqrt(),
            Act::Identity | Act::Tanh => 1.0,
        }
    }
}

/// Fully-connected layer `y = x W^T + b`, weight stored `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<R> {
    pub weight: Param<R>,
    pub bias: Param<R>,
}

impl<R: Real> Linear<R> {
    pub fn new(fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        Self {
            weight: Param::normal(vec![fan_out, fan_in], std, rng),
            bias: Param::zeros(vec![fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &Mat<R>) -> Mat<R> {
        assert_eq!(x.cols, self.fan_in(), "linear input width");
        let n = self.fan_out();
        let mut y = Mat::zeros(x.rows, n);
        for i in 0..x.rows {
            y.row_mut(i).copy_from_slice(&self.bias.value);
        }
        gemm(x.rows, x.cols, n, R::one(), &x.data, false, &self.weight.value, true, R::one(), &mut y.data);
        y
    }

    pub fn backward(&mut self, x: &Mat<R>, dy: &Mat<R>, grads: bool) -> Mat<R> {
        let (fi, fo) = (self.fan_in(), self.fan_out());
        if grads {
            gemm(fo, x.rows, fi, R::one(), &dy.data, true, &x.data, false, R::one(), &mut self.weight.grad);
            for i in 0..dy.rows {
                for (g, &d) in self.bias.grad.iter_mut().zip(dy.row(i)) {
                    *g += d;
                }
            }
        }
        let mut dx = Mat::zeros(x.rows, fi);
        gemm(x.rows, fo, fi, R::one(), &dy.data, false, &self.weight.value, false, R::zero(), &mut dx.data);
        dx
    }
}

impl<R: Real> Module<R> for Linear<R> {
    fn params(&self) -> Vec<(String, &Param<R>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Stack of fully-connected layers with a shared hidden activation and a
/// separate output activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<R> {
    pub layers: Vec<Linear<R>>,
    pub hidden: Act,
    pub output: Act,
}

/// Outputs of every layer (post-activation); `outs[0]` is the input.
#[derive(Clone, Debug)]
pub struct MlpCache<R> {
    outs: Vec<Mat<R>>,
}

impl<R: Real> MlpCache<R> {
    pub fn output(&self) -> &Mat<R> {
        self.outs.last().expect("non-empty cache")
    }
}

impl<R: Real> Mlp<R> {
    /// `widths = [in, h1, ..., out]`.
    pub fn new(widths: &[usize], hidden: Act, output: Act, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "mlp needs at least one layer");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Linear::new(widths[i], widths[i + 1], act.gain(), rng)
            })
            .collect();
        Self { layers, hidden, output }
    }

    pub fn forward(&self, x: &Mat<R>) -> MlpCache<R> {
        let n = self.layers.len();
        let mut outs = Vec::with_capacity(n + 1);
        outs.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(outs.last().expect("input"));
            let act = if i + 1 == n { self.output } else { self.hidden };
            act.apply(&mut y.data);
            outs.push(y);
        }
        MlpCache { outs }
    }

    pub fn backward(&mut self, cache: &MlpCache<R>, dy: &Mat<R>, grads: bool) -> Mat<R> {
        let n = self.layers.len();
        let mut g = dy.clone();
        for i in (0..n).rev() {
            let act = if i + 1 == n { self.output } else { self.hidden };
            act.backward(&cache.outs[i + 1].data, &mut g.data);
            g = self.layers[i].backward(&cache.outs[i], &g, grads);
        }
        g
    }
}

impl<R: Real> Module<R> for Mlp<R> {
    fn params(&self) -> Vec<(String, &Param<R>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&i.to_string(), l.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefixed_mut(&i.to_string(), l.params_mut()))
            .collect()
    }
}

/// 2-D convolution over `(C, B, H, W)` maps via im2col + GEMM.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<R> {
    pub weight: Param<R>,
    pub bias: Param<R>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache<R> {
    input: Maps<R>,
    out_hw: (usize, usize),
}

/// Column buffers are built for a few samples at a time so they stay in
/// cache; this bounds one chunk's im2col size (in elements).
const COL_CHUNK: usize = 1 << 17;

/// Strided GEMM `C = A * B + beta * C` where `C` has row stride `rsc`.
#[allow(clippy::too_many_arguments)]
fn gemm_view<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    (rsa, csa): (usize, usize),
    b: &[R],
    (rsb, csb): (usize, usize),
    beta: R,
    c: &mut [R],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k > 0, "gemm_view: empty inner dimension");
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm_view: lhs bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm_view: rhs bounds");
    assert!((m - 1) * rsc + n - 1 < c.len(), "gemm_view: output bounds");
    // SAFETY: every addressed element lies inside its slice (asserted above)
    // and `c` is borrowed mutably, so it cannot alias `a` or `b`.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            R::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        )
    }
}

impl<R: Real> Conv2d<R> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Self {
            weight: Param::normal(vec![c_out, fan_in], gain / (fan_in as f64).sqrt(), rng),
            bias: Param::zeros(vec![c_out]),
            kernel,
            stride,
            pad,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape[1] / (self.kernel * self.kernel)
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn chunk(&self, b: usize, ho: usize, wo: usize) -> usize {
        (COL_CHUNK / (self.weight.shape[1] * ho * wo).max(1)).clamp(1, b.max(1))
    }

    /// Columns for samples `b0..b1`, one row per (channel, ky, kx).
    fn im2col(&self, x: &Maps<R>, b0: usize, b1: usize, ho: usize, wo: usize, col: &mut Vec<R>) {
        let k = self.kernel;
        let nb = b1 - b0;
        let ncol = nb * ho * wo;
        col.clear();
        col.resize(x.c * k * k * ncol, R::zero());
        let (h, w) = (x.h as isize, x.w as isize);
        for ci in 0..x.c {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let row = &mut col[r * ncol..(r + 1) * ncol];
                    for bi in 0..nb {
                        let src = x.plane_of(ci, b0 + bi);
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            let dst = &mut row[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                            let src_row = &src[(iy * w) as usize..((iy + 1) * w) as usize];
                            if self.stride == 1 {
                                let lo = (self.pad as isize - kx as isize).max(0) as usize;
                                let hi = ((w + self.pad as isize - kx as isize).min(wo as isize)).max(lo as isize) as usize;
                                let s0 = (lo + kx) as isize - self.pad as isize;
                                dst[lo..hi].copy_from_slice(&src_row[s0 as usize..s0 as usize + hi - lo]);
                                continue;
                            }
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add columns of samples `b0..b1` into `dx`.
    fn col2im(&self, col: &[R], dx: &mut Maps<R>, b0: usize, b1: usize, ho: usize, wo: usize) {
        let k = self.kernel;
        let nb = b1 - b0;
        let ncol = nb * ho * wo;
        let (hi, wi) = (dx.h as isize, dx.w as isize);
        for ci in 0..dx.c {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let row = &col[r * ncol..(r + 1) * ncol];
                    for bi in 0..nb {
                        let off = dx.offset(ci, b0 + bi);
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= hi {
                                continue;
                            }
                            let src = &row[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                            let base = off + (iy * wi) as usize;
                            for (ox, &g) in src.iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < wi {
                                    dx.data[base + ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Maps<R>) -> (Maps<R>, ConvCache<R>) {
        assert_eq!(x.c, self.c_in(), "conv input channels");
        let (ho, wo) = self.out_size(x.h, x.w);
        let co = self.c_out();
        let kk = self.weight.shape[1];
        let hw = ho * wo;
        let ncol = x.b * hw;
        let mut y = Maps::zeros(co, x.b, ho, wo);
        for (o, chunk) in y.data.chunks_mut(ncol).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias.value[o]);
        }
        if self.is_pointwise() {
            gemm_view(co, kk, ncol, &self.weight.value, (kk, 1), &x.data, (ncol, 1), R::one(), &mut y.data, ncol);
        } else {
            let step = self.chunk(x.b, ho, wo);
            let mut col = Vec::new();
            for b0 in (0..x.b).step_by(step) {
                let b1 = (b0 + step).min(x.b);
                self.im2col(x, b0, b1, ho, wo, &mut col);
                let n = (b1 - b0) * hw;
                let out = &mut y.data[b0 * hw..];
                gemm_view(co, kk, n, &self.weight.value, (kk, 1), &col, (n, 1), R::one(), out, ncol);
            }
        }
        (y, ConvCache { input: x.clone(), out_hw: (ho, wo) })
    }

    /// Returns the input gradient when `need_dx`.
    pub fn backward(&mut self, cache: &ConvCache<R>, dy: &Maps<R>, grads: bool, need_dx: bool) -> Option<Maps<R>> {
        let co = self.c_out();
        let kk = self.weight.shape[1];
        let x = &cache.input;
        let (ho, wo) = cache.out_hw;
        let hw = ho * wo;
        let ncol = x.b * hw;
        assert_eq!(dy.data.len(), co * ncol, "conv grad size");
        if grads {
            for (o, chunk) in dy.data.chunks(ncol).enumerate() {
                let s: R = chunk.iter().copied().sum();
                self.bias.grad[o] += s;
            }
        }
        if !grads && !need_dx {
            return None;
        }
        let mut dx = need_dx.then(|| Maps::zeros(x.c, x.b, x.h, x.w));
        if self.is_pointwise() {
            if grads {
                gemm_view(co, ncol, kk, &dy.data, (ncol, 1), &x.data, (1, ncol), R::one(), &mut self.weight.grad, kk);
            }
            if let Some(dx) = dx.as_mut() {
                gemm_view(kk, co, ncol, &self.weight.value, (1, kk), &dy.data, (ncol, 1), R::zero(), &mut dx.data, ncol);
            }
            return dx;
        }
        let step = self.chunk(x.b, ho, wo);
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        for b0 in (0..x.b).step_by(step) {
            let b1 = (b0 + step).min(x.b);
            let n = (b1 - b0) * hw;
            let g = &dy.data[b0 * hw..];
            if grads {
                self.im2col(x, b0, b1, ho, wo, &mut col);
                gemm_view(co, n, kk, g, (ncol, 1), &col, (1, n), R::one(), &mut self.weight.grad, kk);
            }
            if let Some(dx) = dx.as_mut() {
                dcol.clear();
                dcol.resize(kk * n, R::zero());
                gemm_view(kk, co, n, &self.weight.value, (1, kk), g, (ncol, 1), R::zero(), &mut dcol, n);
                self.col2im(&dcol, dx, b0, b1, ho, wo);
            }
        }
        dx
    }
}

impl<R: Real> Module<R> for Conv2d<R> {
    fn params(&self) -> Vec<(String, &Param<R>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

pub fn upsample2x<R: Real>(x: &Maps<R>) -> Maps<R> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut y = Maps::zeros(x.c, x.b, h2, w2);
    for cb in 0..x.c * x.b {
        let src = &x.data[cb * x.plane()..(cb + 1) * x.plane()];
        let dst = &mut y.data[cb * h2 * w2..(cb + 1) * h2 * w2];
        for oy in 0..h2 {
            let srow = &src[(oy / 2) * x.w..(oy / 2 + 1) * x.w];
            for ox in 0..w2 {
                dst[oy * w2 + ox] = srow[ox / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward<R: Real>(dy: &Maps<R>) -> Maps<R> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Maps::zeros(dy.c, dy.b, h, w);
    for cb in 0..dy.c * dy.b {
        let src = &dy.data[cb * dy.plane()..(cb + 1) * dy.plane()];
        let dst = &mut dx.data[cb * h * w..(cb + 1) * h * w];
        for oy in 0..dy.h {
            for ox in 0..dy.w {
                dst[(oy / 2) * w + ox / 2] += src[oy * dy.w + ox];
            }
        }
    }
    dx
}

/// Spatial mean per channel: `(C, B, H, W) -> (B, C)`.
pub fn global_avg_pool<R: Real>(x: &Maps<R>) -> Mat<R> {
    let mut y = Mat::zeros(x.b, x.c);
    let inv = R::one() / R::lit(x.plane() as f64);
    for c in 0..x.c {
        for b in 0..x.b {
            let off = x.offset(c, b);
            let s: R = x.data[off..off + x.plane()].iter().copied().sum();
            y.data[b * x.c + c] = s * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward<R: Real>(dy: &Mat<R>, shape: (usize, usize, usize, usize)) -> Maps<R> {
    let (c, b, h, w) = shape;
    let mut dx = Maps::zeros(c, b, h, w);
    let inv = R::one() / R::lit((h * w) as f64);
    for ci in 0..c {
        for bi in 0..b {
            let g = dy.data[bi * c + ci] * inv;
            let off = dx.offset(ci, bi);
            dx.data[off..off + h * w].iter_mut().for_each(|v| *v = g);
        }
    }
    dx
}

/// Per-sample, per-channel affine modulation of feature maps:
/// `y[c,b] = x[c,b] * (1 + scale[b,c]) + shift[b,c]` where
/// `u = [scale | shift]` has shape `(B, 2C)`.
pub fn modulate<R: Real>(x: &Maps<R>, u: &Mat<R>) -> Maps<R> {
    assert_eq!(u.rows, x.b, "modulation batch");
    assert_eq!(u.cols, 2 * x.c, "modulation width");
    let mut y = x.clone();
    for c in 0..x.c {
        for b in 0..x.b {
            let s = R::one() + u.data[b * u.cols + c];
            let t = u.data[b * u.cols + x.c + c];
            let off = x.offset(c, b);
            y.data[off..off + x.plane()].iter_mut().for_each(|v| *v = *v * s + t);
        }
    }
    y
}

pub fn modulate_backward<R: Real>(x: &Maps<R>, u: &Mat<R>, dy: &Maps<R>) -> (Maps<R>, Mat<R>) {
    let mut dx = dy.clone();
    let mut du = Mat::zeros(u.rows, u.cols);
    for c in 0..x.c {
        for b in 0..x.b {
            let s = R::one() + u.data[b * u.cols + c];
            let off = x.offset(c, b);
            let mut gs = R::zero();
            let mut gt = R::zero();
            for p in 0..x.plane() {
                let g = dy.data[off + p];
                gs += g * x.data[off + p];
                gt += g;
                dx.data[off + p] = g * s;
            }
            du.data[b * u.cols + c] = gs;
            du.data[b * u.cols + x.c + c] = gt;
        }
    }
    (dx, du)
}

/// Bilinear taps along one axis: output index -> (i0, i1, w0, w1).
fn bilinear_taps(start: usize, side: usize, out: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = side as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(side - 1);
            let f = src - i0 as f64;
            (start + i0, start + i1, 1.0 - f, f)
        })
        .collect()
}

/// A square crop window `(x0, y0, side)` inside a `w x w` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
}

/// Differentiable per-sample crop followed by bilinear resize back to
/// `out x out` (half-pixel centers). A full-image window with
/// `out == w` is an exact identity.
#[derive(Clone, Debug)]
pub struct CropResize {
    windows: Vec<CropWindow>,
    out: usize,
}

impl CropResize {
    pub fn new(windows: Vec<CropWindow>, out: usize) -> Self {
        Self { windows, out }
    }

    fn is_identity(&self, w: &CropWindow, in_side: usize) -> bool {
        w.x0 == 0 && w.y0 == 0 && w.side == in_side && self.out == in_side
    }

    pub fn forward<R: Real>(&self, x: &Maps<R>) -> Maps<R> {
        assert_eq!(self.windows.len(), x.b, "one crop per sample");
        let o = self.out;
        let mut y = Maps::zeros(x.c, x.b, o, o);
        for (b, win) in self.windows.iter().enumerate() {
            assert!(win.x0 + win.side <= x.w && win.y0 + win.side <= x.h, "crop inside image");
            if self.is_identity(win, x.w) {
                for c in 0..x.c {
                    let (si, di) = (x.offset(c, b), y.offset(c, b));
                    let n = x.plane();
                    y.data[di..di + n].copy_from_slice(&x.data[si..si + n]);
                }
                continue;
            }
            let ty = bilinear_taps(win.y0, win.side, o);
            let tx = bilinear_taps(win.x0, win.side, o);
            for c in 0..x.c {
                let si = x.offset(c, b);
                let di = y.offset(c, b);
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let v = |yy: usize, xx: usize| x.data[si + yy * x.w + xx].as_f64();
                        let val = wy0 * (wx0 * v(y0, x0) + wx1 * v(y0, x1)) + wy1 * (wx0 * v(y1, x0) + wx1 * v(y1, x1));
                        y.data[di + oy * o + ox] = R::lit(val);
                    }
                }
            }
        }
        y
    }

    pub fn backward<R: Real>(&self, dy: &Maps<R>, in_side: usize) -> Maps<R> {
        let mut dx = Maps::zeros(dy.c, dy.b, in_side, in_side);
        let o = self.out;
        for (b, win) in self.windows.iter().enumerate() {
            if self.is_identity(win, in_side) {
                for c in 0..dy.c {
                    let (si, di) = (dy.offset(c, b), dx.offset(c, b));
                    let n = dy.plane();
                    dx.data[di..di + n].copy_from_slice(&dy.data[si..si + n]);
                }
                continue;
            }
            let ty = bilinear_taps(win.y0, win.side, o);
            let tx = bilinear_taps(win.x0, win.side, o);
            for c in 0..dy.c {
                let si = dy.offset(c, b);
                let di = dx.offset(c, b);
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let g = dy.data[si + oy * o + ox];
                        let mut add = |yy: usize, xx: usize, wgt: f64| {
                            dx.data[di + yy * in_side + xx] += g * R::lit(wgt);
                        };
                        add(y0, x0, wy0 * wx0);
                        add(y0, x1, wy0 * wx1);
                        add(y1, x0, wy1 * wx0);
                        add(y1, x1, wy1 * wx1);
                    }
                }
            }
        }
        dx
    }
}
