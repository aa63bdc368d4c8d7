//! Adversarial and contrastive training objectives with analytic gradients.

use crate::error::{Error, Result};
use crate::nn::{Mat, Real};
use serde::{Deserialize, Serialize};

/// Inner exponent ceiling used by exponential sharpening.
pub const DEFAULT_SHARPEN_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Softmax temperature.
    pub tau: f64,
    /// Weight of the generator-side contrastive term.
    pub lam: f64,
    /// Weight of the discriminator-feature contrastive term.
    pub gam: f64,
    /// Wrap every `exp(S / tau)` in a second exponential before the softmax.
    pub sharpen: bool,
    #[serde(default = "default_clamp")]
    pub sharpen_clamp: f64,
}

fn default_clamp() -> f64 {
    DEFAULT_SHARPEN_CLAMP
}

impl LossWeights {
    pub fn language_free() -> Self {
        Self { tau: 0.5, lam: 10.0, gam: 10.0, sharpen: true, sharpen_clamp: DEFAULT_SHARPEN_CLAMP }
    }

    pub fn supervised() -> Self {
        Self { gam: 5.0, ..Self::language_free() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lam >= 0.0 && self.gam >= 0.0) {
            return Err(Error::Config(format!("lambda and gamma must be >= 0, got {} and {}", self.lam, self.gam)));
        }
        if !(self.sharpen_clamp > 0.0) {
            return Err(Error::Config("sharpen clamp must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::language_free()
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvLosses {
    pub g: f64,
    pub d: f64,
}

/// Non-saturating conditional GAN losses over summed batches:
/// `L_G = -sum log s(fake)`, `L_D = -sum log s(real) - sum log(1 - s(fake))`.
pub fn adv_losses(logits_real: &[f64], logits_fake: &[f64]) -> Result<AdvLosses> {
    if logits_real.is_empty() {
        return Err(Error::Data("adversarial loss needs at least one logit".into()));
    }
    if logits_real.len() != logits_fake.len() {
        return Err(Error::dim(logits_real.len(), logits_fake.len()));
    }
    Ok(AdvLosses { g: generator_adv(logits_fake).0, d: discriminator_adv(logits_real, logits_fake).0 })
}

/// `L_G` and its gradient with respect to the fake logits.
pub fn generator_adv(logits_fake: &[f64]) -> (f64, Vec<f64>) {
    let v = logits_fake.iter().map(|&f| softplus(-f)).sum();
    let g = logits_fake.iter().map(|&f| sigmoid(f) - 1.0).collect();
    (v, g)
}

/// `L_D` and its gradients with respect to real and fake logits.
pub fn discriminator_adv(logits_real: &[f64], logits_fake: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let v = logits_real.iter().map(|&r| softplus(-r)).sum::<f64>()
        + logits_fake.iter().map(|&f| softplus(f)).sum::<f64>();
    let gr = logits_real.iter().map(|&r| sigmoid(r) - 1.0).collect();
    let gf = logits_fake.iter().map(|&f| sigmoid(f)).collect();
    (v, gr, gf)
}

/// Row-normalized copy of `x` plus the original row norms.
pub fn normalize_rows(x: &Mat<f64>) -> Result<(Mat<f64>, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Normalization);
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Gradient through `xhat = x / |x|` for every row.
pub fn normalize_rows_backward(xhat: &Mat<f64>, norms: &[f64], dxhat: &Mat<f64>) -> Mat<f64> {
    let mut dx = dxhat.clone();
    for i in 0..xhat.rows {
        let dot: f64 = xhat.row(i).iter().zip(dxhat.row(i)).map(|(a, b)| a * b).sum();
        let xh = xhat.row(i);
        for (k, g) in dx.row_mut(i).iter_mut().enumerate() {
            *g = (*g - xh[k] * dot) / norms[i];
        }
    }
    dx
}

/// `S[j][i] = cos(a_j, b_i)`.
pub fn cosine_matrix(a: &Mat<f64>, b: &Mat<f64>) -> Result<Mat<f64>> {
    if a.cols != b.cols {
        return Err(Error::dim(a.cols, b.cols));
    }
    let (ah, _) = normalize_rows(a)?;
    let (bh, _) = normalize_rows(b)?;
    let mut s = Mat::zeros(a.rows, b.rows);
    crate::nn::gemm(a.rows, a.cols, b.rows, 1.0, &ah.data, false, &bh.data, true, 0.0, &mut s.data);
    Ok(s)
}

#[derive(Clone, Debug)]
pub struct ContrastiveOut<R> {
    pub value: f64,
    pub d_features: Mat<R>,
    pub d_conditions: Mat<R>,
}

/// Contrastive loss from a precomputed `n x n` similarity matrix with
/// `S(j, i)` pairing feature row `j` with condition `i`. Returns the value and
/// its gradient with respect to `S`.
pub fn contrastive_from_similarity(s: &Mat<f64>, w: &LossWeights) -> Result<(f64, Mat<f64>)> {
    w.validate()?;
    if s.rows != s.cols {
        return Err(Error::dim(s.rows, s.cols));
    }
    let n = s.rows;
    let tau = w.tau;
    // logits a[j][i] and da/dS
    let mut a = Mat::zeros(n, n);
    let mut da_ds = Mat::zeros(n, n);
    for k in 0..n * n {
        let inner = s.data[k] / tau;
        if w.sharpen {
            let clamped = inner.min(w.sharpen_clamp);
            let e = clamped.exp();
            a.data[k] = e;
            da_ds.data[k] = if inner > w.sharpen_clamp { 0.0 } else { e / tau };
        } else {
            a.data[k] = inner;
            da_ds.data[k] = 1.0 / tau;
        }
    }

    let mut value = 0.0;
    let mut ds = Mat::zeros(n, n);
    for i in 0..n {
        let col_max = (0..n).map(|j| a.data[j * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..n).map(|j| (a.data[j * n + i] - col_max).exp()).sum();
        let lse = col_max + sum.ln();
        value -= tau * (a.data[i * n + i] - lse);
        for j in 0..n {
            let p = (a.data[j * n + i] - lse).exp();
            let delta = if i == j { 1.0 } else { 0.0 };
            ds.data[j * n + i] = tau * (p - delta) * da_ds.data[j * n + i];
        }
    }
    if !value.is_finite() {
        return Err(Error::Numerical("contrastive loss is not finite".into()));
    }
    Ok((value, ds))
}

/// Contrastive regularizer pairing feature row `i` with condition row `i`:
///
/// `-tau * sum_i log( e^{a(i,i)} / sum_j e^{a(j,i)} )`, `a(j,i) = S(j,i)/tau`
/// with `S(j,i) = cos(features_j, conditions_i)`. With sharpening,
/// `a(j,i) = exp(min(S(j,i)/tau, clamp))`.
pub fn contrastive<R: Real>(features: &Mat<R>, conditions: &Mat<R>, w: &LossWeights) -> Result<f64> {
    Ok(contrastive_with_grad(features, conditions, w)?.value)
}

pub fn contrastive_with_grad<R: Real>(
    features: &Mat<R>,
    conditions: &Mat<R>,
    w: &LossWeights,
) -> Result<ContrastiveOut<R>> {
    w.validate()?;
    if features.rows != conditions.rows {
        return Err(Error::dim(features.rows, conditions.rows));
    }
    if features.cols != conditions.cols {
        return Err(Error::dim(features.cols, conditions.cols));
    }
    let n = features.rows;
    let f: Mat<f64> = features.cast();
    let h: Mat<f64> = conditions.cast();
    let (fh, fnorm) = normalize_rows(&f)?;
    let (hh, hnorm) = normalize_rows(&h)?;
    let mut s = Mat::zeros(n, n);
    crate::nn::gemm(n, f.cols, n, 1.0, &fh.data, false, &hh.data, true, 0.0, &mut s.data);

    let (value, ds) = contrastive_from_similarity(&s, w)?;

    // dS[j][i] -> d fhat_j = sum_i dS[j][i] hhat_i ; d hhat_i = sum_j dS[j][i] fhat_j
    let mut dfh = Mat::zeros(n, f.cols);
    crate::nn::gemm(n, n, f.cols, 1.0, &ds.data, false, &hh.data, false, 0.0, &mut dfh.data);
    let mut dhh = Mat::zeros(n, f.cols);
    crate::nn::gemm(n, n, f.cols, 1.0, &ds.data, true, &fh.data, false, 0.0, &mut dhh.data);
    let df = normalize_rows_backward(&fh, &fnorm, &dfh);
    let dh = normalize_rows_backward(&hh, &hnorm, &dhh);
    Ok(ContrastiveOut { value, d_features: df.cast(), d_conditions: dh.cast() })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub g: f64,
    pub d: f64,
    pub con_d: f64,
    pub con_g: f64,
}

/// `(L_G', L_D')` with `L_D' = L_D + gam * L_ConD` and
/// `L_G' = L_G + gam * L_ConD + lam * L_ConG`.
pub fn total_losses(parts: &LossParts, w: &LossWeights) -> Result<(f64, f64)> {
    let all = [parts.g, parts.d, parts.con_d, parts.con_g];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite loss component in {parts:?}")));
    }
    let d_total = parts.d + w.gam * parts.con_d;
    let g_total = parts.g + w.gam * parts.con_d + w.lam * parts.con_g;
    Ok((g_total, d_total))
}
