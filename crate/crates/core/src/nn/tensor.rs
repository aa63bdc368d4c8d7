use super::Real;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Dense row-major matrix; rows index the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<R> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<R>,
}

impl<R: Real> Mat<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![R::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec size");
        Self { rows, cols, data }
    }

    pub fn from_rows<T: AsRef<[f64]>>(rows: &[T]) -> Self {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend(r.as_ref().iter().map(|&v| R::lit(v)));
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                R::lit(v)
            })
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|v| v.as_f64()).collect()
    }

    /// Horizontal concatenation `[self, other]`.
    pub fn hcat(&self, other: &Mat<R>) -> Mat<R> {
        assert_eq!(self.rows, other.rows, "hcat rows");
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Mat { rows: self.rows, cols, data }
    }

    /// Inverse of [`Mat::hcat`]: split columns at `at`.
    pub fn hsplit(&self, at: usize) -> (Mat<R>, Mat<R>) {
        let mut left = Mat::zeros(self.rows, at);
        let mut right = Mat::zeros(self.rows, self.cols - at);
        for i in 0..self.rows {
            let r = self.row(i);
            left.row_mut(i).copy_from_slice(&r[..at]);
            right.row_mut(i).copy_from_slice(&r[at..]);
        }
        (left, right)
    }

    pub fn add_assign(&mut self, other: &Mat<R>) {
        assert_eq!(self.data.len(), other.data.len(), "add_assign size");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: R) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Real>(&self) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }
}

/// Batch of feature maps stored channel-major as `(C, B, H, W)`.
///
/// This layout makes a convolution a single GEMM over the whole batch:
/// weights `(C_out, C_in*k*k)` times columns `(C_in*k*k, B*H*W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Maps<R> {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<R>,
}

impl<R: Real> Maps<R> {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Self { c, b, h, w, data: vec![R::zero(); c * b * h * w] }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Spatial plane of channel `c`, sample `b`.
    pub fn plane_of(&self, c: usize, b: usize) -> &[R] {
        let off = self.offset(c, b);
        &self.data[off..off + self.plane()]
    }

    /// Offset of `(c, b, 0, 0)`.
    pub fn offset(&self, c: usize, b: usize) -> usize {
        (c * self.b + b) * self.plane()
    }

    pub fn same_shape(&self) -> Self {
        Self::zeros(self.c, self.b, self.h, self.w)
    }

    /// Build from per-sample HWC images (values already in network range).
    pub fn from_hwc(images: &[&[f32]], c: usize, h: usize, w: usize) -> Self {
        let b = images.len();
        let mut out = Self::zeros(c, b, h, w);
        for (bi, img) in images.iter().enumerate() {
            assert_eq!(img.len(), h * w * c, "image size");
            for ch in 0..c {
                let off = out.offset(ch, bi);
                for p in 0..h * w {
                    out.data[off + p] = R::lit(img[p * c + ch] as f64);
                }
            }
        }
        out
    }

    /// Extract sample `bi` as an HWC `f32` buffer.
    pub fn to_hwc(&self, bi: usize) -> Vec<f32> {
        let mut out = vec![0f32; self.plane() * self.c];
        for ch in 0..self.c {
            let off = self.offset(ch, bi);
            for p in 0..self.plane() {
                out[p * self.c + ch] = self.data[off + p].as_f64() as f32;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Maps<R>) {
        assert_eq!(self.data.len(), other.data.len(), "add_assign size");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<T: Real>(&self) -> Maps<T> {
        Maps {
            c: self.c,
            b: self.b,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<R> {
    pub shape: Vec<usize>,
    pub value: Vec<R>,
    pub grad: Vec<R>,
}

impl<R: Real> Param<R> {
    pub fn new(shape: Vec<usize>, value: Vec<R>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape");
        let grad = vec![R::zero(); value.len()];
        Self { shape, value, grad }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![R::zero(); n])
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                R::lit(v * std)
            })
            .collect();
        Self::new(shape, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = R::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named access to every trainable tensor of a network. Names are stable
/// and hierarchical (`"mapping.0.weight"`); they key checkpoints and
/// optimizer state.
pub trait Module<R: Real> {
    fn params(&self) -> Vec<(String, &Param<R>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    fn params_finite(&self) -> bool {
        self.params().iter().all(|(_, p)| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Prefix every name yielded by a sub-module.
pub(crate) fn prefixed<'a, R: Real>(
    prefix: &str,
    items: Vec<(String, &'a Param<R>)>,
) -> impl Iterator<Item = (String, &'a Param<R>)> + 'a {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, p)| (format!("{prefix}.{n}"), p))
}

pub(crate) fn prefixed_mut<'a, R: Real>(
    prefix: &str,
    items: Vec<(String, &'a mut Param<R>)>,
) -> impl Iterator<Item = (String, &'a mut Param<R>)> + 'a {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, p)| (format!("{prefix}.{n}"), p))
}
