//! Probability that a fixed-perturbation pseudo feature stays within cosine
//! similarity `c` of its image feature, as a closed-form lower bound and as
//! a Monte-Carlo estimate.
//!
//! The bound is `P(a.b >= (c - 1)/xi + c)` for independent unit vectors,
//! evaluated from the density of the inner product. Two density conventions
//! are available:
//!
//! * [`DensityConvention::Sphere`]: `(1 - x^2)^((d-3)/2)`, the exact law of
//!   `a.b` for uniform `a, b` on the unit sphere in `R^d`;
//! * [`DensityConvention::PaperExact`]: `(1 - x^2)^(d/2 - 1)`, the form with
//!   normalizer `G(d/2 + 1/2) / (sqrt(pi) G(d/2))`, which is the sphere law
//!   one dimension up.
//!
//! [`calibrate_density`] picks the one that matches simulation.

use super::{pseudo_fixed, FixedPerturbSpec};
use crate::error::{Error, Result};
use crate::features::{cosine_sim, FeatureVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityConvention {
    Sphere,
    PaperExact,
}

impl DensityConvention {
    /// Exponent `e` in `(1 - x^2)^e`.
    pub fn exponent(self, d: usize) -> f64 {
        match self {
            DensityConvention::Sphere => (d as f64 - 3.0) / 2.0,
            DensityConvention::PaperExact => d as f64 / 2.0 - 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundQuery {
    /// Cosine similarity threshold.
    pub c: f64,
    /// Perturbation level.
    pub xi: f64,
    /// Feature dimension.
    pub d: usize,
}

impl BoundQuery {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(Error::Config(format!("threshold c must lie in (0, 1], got {}", self.c)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::Config(format!("xi must be > 0, got {}", self.xi)));
        }
        if self.d < 2 {
            return Err(Error::Config(format!("dimension must be >= 2, got {}", self.d)));
        }
        Ok(())
    }

    /// Inner-product threshold `(c - 1)/xi + c`, before clamping.
    pub fn upper_limit(&self) -> f64 {
        (self.c - 1.0) / self.xi + self.c
    }
}

/// Absolute tolerance of the adaptive quadrature.
pub const QUAD_TOL: f64 = 1e-8;

// Gauss-Kronrod 7/15 abscissae and weights.
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let s = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (k, err) = gk15(f, a, b);
    if err <= tol || depth == 0 || (b - a).abs() < 1e-14 {
        return k;
    }
    let m = 0.5 * (a + b);
    adaptive(f, a, m, tol / 2.0, depth - 1) + adaptive(f, m, b, tol / 2.0, depth - 1)
}

/// Adaptive Gauss-Kronrod integral of `f` over `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    adaptive(f, a, b, tol, 48)
}

/// `ln` of the normalizer of `(1 - x^2)^e` on `[-1, 1]`:
/// `G(e + 3/2) / (sqrt(pi) G(e + 1))`.
fn ln_normalizer(e: f64) -> f64 {
    ln_gamma(e + 1.5) - 0.5 * PI.ln() - ln_gamma(e + 1.0)
}

/// `P(a.b >= z)` under the chosen density, by quadrature.
///
/// Substituting `x = cos t` turns `(1 - x^2)^e dx` into `sin(t)^(2e+1) dt`,
/// which is smooth even where the density is singular (`d = 2`).
pub fn inner_product_tail(z: f64, d: usize, conv: DensityConvention) -> f64 {
    if z <= -1.0 {
        return 1.0;
    }
    if z >= 1.0 {
        return 0.0;
    }
    let e = conv.exponent(d);
    let p = 2.0 * e + 1.0;
    let ln_c = ln_normalizer(e);
    let f = |t: f64| {
        let s = t.sin();
        if s <= 0.0 {
            if p == 0.0 {
                ln_c.exp()
            } else {
                0.0
            }
        } else {
            (ln_c + p * s.ln()).exp()
        }
    };
    integrate(&f, 0.0, z.acos(), QUAD_TOL).clamp(0.0, 1.0)
}

/// `P(a.b <= z)` under the chosen density.
pub fn inner_product_cdf(z: f64, d: usize, conv: DensityConvention) -> f64 {
    1.0 - inner_product_tail(z, d, conv)
}

/// Lower bound on `P(Sim(f, h') >= c)` for fixed perturbations of level
/// `xi` in dimension `d`. The integration limit is clamped to `[-1, 1]`.
pub fn theorem1_bound(q: &BoundQuery, conv: DensityConvention) -> Result<f64> {
    q.validate()?;
    let u = q.upper_limit().clamp(-1.0, 1.0);
    Ok(inner_product_tail(u, q.d, conv))
}

/// Per-sample lower bound `(1 + xi a.b) / (1 + xi)` on `Sim(f, h')`, where
/// `a`, `b` are the unit directions of the image feature and the noise.
/// Valid whenever `1 + xi a.b >= 0`, so for every sample when `xi <= 1`.
pub fn pointwise_lower_bound(a_dot_b: f64, xi: f64) -> f64 {
    (1.0 + xi * a_dot_b) / (1.0 + xi)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McCheck {
    pub empirical_prob: f64,
    pub bound: f64,
    pub std_err: f64,
    pub passed: bool,
    pub trials: usize,
}

pub const MIN_MC_TRIALS: usize = 10_000;

/// Sample Gaussian noise, form pseudo features around the unit vector
/// `e_1`, and compare the fraction with `Sim >= c` to the bound:
/// `passed` iff `p_hat >= bound - 3 * se`, with `se = sqrt(p (1 - p) / trials)`
/// at the Agresti-Coull estimate `p = (hits + 2) / (trials + 4)`, which stays
/// positive when no trial hits.
pub fn theorem1_mc_check(q: &BoundQuery, trials: usize, rng: &mut impl Rng, conv: DensityConvention) -> Result<McCheck> {
    if trials < MIN_MC_TRIALS {
        return Err(Error::Config(format!("need at least {MIN_MC_TRIALS} trials, got {trials}")));
    }
    let bound = theorem1_bound(q, conv)?;
    let mut f = vec![0.0; q.d];
    f[0] = 1.0;
    let f = FeatureVector::new(f)?;
    let spec = FixedPerturbSpec { xi: q.xi };
    let mut hits = 0usize;
    let mut t = 0;
    while t < trials {
        let eps: Vec<f64> = (0..q.d).map(|_| StandardNormal.sample(rng)).collect();
        let h = match pseudo_fixed(&f, &spec, &eps) {
            Ok(h) => h,
            Err(Error::DegenerateNoise) => continue,
            Err(e) => return Err(e),
        };
        if cosine_sim(&f, &h.as_feature())? >= q.c {
            hits += 1;
        }
        t += 1;
    }
    let p = hits as f64 / trials as f64;
    let adjusted = (hits as f64 + 2.0) / (trials as f64 + 4.0);
    let std_err = (adjusted * (1.0 - adjusted) / trials as f64).sqrt();
    Ok(McCheck { empirical_prob: p, bound, std_err, passed: p >= bound - 3.0 * std_err, trials })
}

/// Kolmogorov-Smirnov distance between simulated `a.b` (uniform unit
/// vectors in `R^d`) and each density convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub d: usize,
    pub ks_sphere: f64,
    pub ks_paper_exact: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub rows: Vec<CalibrationRow>,
    pub selected: DensityConvention,
}

/// Simulate `a.b` at each `d` and select the convention with the smaller
/// worst-case KS distance.
pub fn calibrate_density(dims: &[usize], samples: usize, rng: &mut impl Rng) -> Result<Calibration> {
    if dims.iter().any(|&d| d < 2) || samples == 0 {
        return Err(Error::Config("calibration needs d >= 2 and samples > 0".into()));
    }
    let mut rows = Vec::with_capacity(dims.len());
    for &d in dims {
        let mut dots: Vec<f64> = (0..samples)
            .map(|_| loop {
                let b: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
                let n = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    break b[0] / n;
                }
            })
            .collect();
        dots.sort_by(|a, b| a.total_cmp(b));
        let ks = |conv: DensityConvention| {
            dots.iter()
                .enumerate()
                .map(|(i, &z)| {
                    let cdf = inner_product_cdf(z, d, conv);
                    let lo = i as f64 / samples as f64;
                    let hi = (i + 1) as f64 / samples as f64;
                    (cdf - lo).abs().max((hi - cdf).abs())
                })
                .fold(0.0, f64::max)
        };
        rows.push(CalibrationRow { d, ks_sphere: ks(DensityConvention::Sphere), ks_paper_exact: ks(DensityConvention::PaperExact) });
    }
    let worst = |f: fn(&CalibrationRow) -> f64| rows.iter().map(f).fold(0.0, f64::max);
    let selected = if worst(|r| r.ks_sphere) <= worst(|r| r.ks_paper_exact) {
        DensityConvention::Sphere
    } else {
        DensityConvention::PaperExact
    };
    Ok(Calibration { rows, selected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::function::beta::beta_reg;

    /// Independent route: `P(a.b <= z) = I_{(1+z)/2}(e + 1, e + 1)`.
    fn beta_cdf(z: f64, e: f64) -> f64 {
        beta_reg(e + 1.0, e + 1.0, (1.0 + z) / 2.0)
    }

    #[test]
    fn quadrature_matches_incomplete_beta() {
        for conv in [DensityConvention::Sphere, DensityConvention::PaperExact] {
            for d in [2, 3, 5, 8, 64, 512] {
                for z in [-0.9, -0.3, 0.0, 0.05, 0.4, 0.95] {
                    let got = inner_product_cdf(z, d, conv);
                    let want = beta_cdf(z, conv.exponent(d));
                    assert!((got - want).abs() < 1e-8, "{conv:?} d={d} z={z}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn density_integrates_to_one() {
        for conv in [DensityConvention::Sphere, DensityConvention::PaperExact] {
            for d in [2, 3, 10, 512] {
                let e = conv.exponent(d);
                let ln_c = ln_normalizer(e);
                let f = |t: f64| if t.sin() > 0.0 { (ln_c + (2.0 * e + 1.0) * t.sin().ln()).exp() } else { 0.0 };
                let total = if e == -0.5 { 1.0 } else { integrate(&f, 0.0, PI, QUAD_TOL) };
                assert!((total - 1.0).abs() < 1e-8, "{conv:?} d={d}: {total}");
            }
        }
    }

    #[test]
    fn limits_of_the_integration_range() {
        // (c-1)/xi + c <= -1: empty integration range, bound is 1.
        let q = BoundQuery { c: 1.0 / 3.0, xi: 0.5, d: 16 };
        assert!(q.upper_limit() <= -1.0 + 1e-12);
        assert_eq!(theorem1_bound(&q, DensityConvention::Sphere).unwrap(), 1.0);
        // c = 1 puts the limit at 1: bound is 0.
        let q = BoundQuery { c: 1.0, xi: 0.3, d: 16 };
        assert_eq!(theorem1_bound(&q, DensityConvention::Sphere).unwrap(), 0.0);
    }

    #[test]
    fn invalid_queries_are_rejected() {
        for q in [
            BoundQuery { c: 0.0, xi: 0.5, d: 8 },
            BoundQuery { c: 1.2, xi: 0.5, d: 8 },
            BoundQuery { c: 0.5, xi: 0.0, d: 8 },
            BoundQuery { c: 0.5, xi: 0.5, d: 1 },
        ] {
            assert!(theorem1_bound(&q, DensityConvention::Sphere).is_err());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = BoundQuery { c: 0.5, xi: 0.5, d: 8 };
        assert!(theorem1_mc_check(&q, 100, &mut rng, DensityConvention::Sphere).is_err());
    }

    #[test]
    fn bound_is_monotone_in_c_and_xi() {
        for conv in [DensityConvention::Sphere, DensityConvention::PaperExact] {
            for d in [2, 8, 64] {
                let cs = [0.1, 0.3, 0.5, 0.7, 0.9, 0.99];
                let xis = [0.05, 0.1, 0.3, 0.5, 1.0, 2.0];
                for &xi in &xis {
                    let vals: Vec<f64> = cs
                        .iter()
                        .map(|&c| theorem1_bound(&BoundQuery { c, xi, d }, conv).unwrap())
                        .collect();
                    assert!(vals.windows(2).all(|w| w[1] <= w[0] + 1e-9), "c: {vals:?}");
                }
                for &c in &cs {
                    let vals: Vec<f64> = xis
                        .iter()
                        .map(|&xi| theorem1_bound(&BoundQuery { c, xi, d }, conv).unwrap())
                        .collect();
                    assert!(vals.windows(2).all(|w| w[1] <= w[0] + 1e-9), "xi: {vals:?}");
                }
            }
        }
    }

    #[test]
    fn vanishing_perturbation_is_always_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = BoundQuery { c: 0.99, xi: 1e-6, d: 32 };
        let r = theorem1_mc_check(&q, 10_000, &mut rng, DensityConvention::Sphere).unwrap();
        assert_eq!(r.empirical_prob, 1.0);
        assert!(r.passed);
    }

    #[test]
    fn threshold_below_worst_case_is_certain() {
        // Sim >= (1 - xi)/(1 + xi) holds for every sample.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for xi in [0.2, 0.5, 0.9] {
            let c = (1.0 - xi) / (1.0 + xi);
            let q = BoundQuery { c, xi, d: 8 };
            let r = theorem1_mc_check(&q, 10_000, &mut rng, DensityConvention::Sphere).unwrap();
            assert_eq!(r.empirical_prob, 1.0, "xi={xi}");
        }
    }

    #[test]
    fn zero_hits_against_a_negligible_bound_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = BoundQuery { c: 0.9, xi: 1.0, d: 512 };
        let r = theorem1_mc_check(&q, 10_000, &mut rng, DensityConvention::Sphere).unwrap();
        assert_eq!(r.empirical_prob, 0.0);
        assert!(r.bound > 0.0 && r.bound < 1e-100);
        assert!(r.std_err > 0.0);
        assert!(r.passed);
    }

    #[test]
    fn calibration_prefers_the_sphere_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cal = calibrate_density(&[2, 3, 8], 20_000, &mut rng).unwrap();
        assert_eq!(cal.selected, DensityConvention::Sphere);
        for row in &cal.rows {
            assert!(row.ks_sphere < 0.02, "{row:?}");
            assert!(row.ks_paper_exact > row.ks_sphere);
        }
    }
}
