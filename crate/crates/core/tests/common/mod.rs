#![allow(dead_code)]

use langfree::features::{EncoderPair, PixelEncoder};
use langfree::gan::GanConfig;
use langfree::nn::{Maps, Mat, Module, Real, Stage};
use langfree::toyset::{oracle_encoders, OracleEncoders};
use langfree::training::TrainConfig;
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

pub const SMALL_D: usize = 16;

/// Generator and discriminator small enough for finite differences: 8px
/// images.
pub fn tiny_gan() -> GanConfig {
    GanConfig {
        z_dim: 6,
        w_dim: 6,
        mapping_layers: 2,
        d: SMALL_D,
        cond_hidden: 6,
        g_channels: vec![3, 3],
        base: 4,
        u_gain: 0.5,
        d_stages: vec![Stage { channels: 4, stride: 2 }, Stage { channels: 6, stride: 1 }],
    }
}

/// Cheap 32px networks for training-loop tests.
pub fn small_gan() -> GanConfig {
    GanConfig {
        z_dim: 8,
        w_dim: 8,
        mapping_layers: 2,
        d: SMALL_D,
        cond_hidden: 8,
        g_channels: vec![4, 4, 4, 4],
        base: 4,
        u_gain: 0.25,
        d_stages: vec![
            Stage { channels: 4, stride: 2 },
            Stage { channels: 8, stride: 2 },
            Stage { channels: 8, stride: 2 },
        ],
    }
}

pub fn small_config() -> TrainConfig {
    TrainConfig { batch: 4, steps: 3, gan: small_gan(), ..TrainConfig::default() }
}

pub fn small_scorer<R: Real>(seed: u64) -> PixelEncoder<R> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    PixelEncoder::new(&[Stage { channels: 4, stride: 2 }, Stage { channels: 8, stride: 2 }], SMALL_D, &mut rng)
}

pub fn oracle(d: usize) -> Arc<OracleEncoders> {
    Arc::new(oracle_encoders(d, 7).unwrap())
}

pub fn oracle_pair(o: &Arc<OracleEncoders>) -> EncoderPair {
    EncoderPair::new(o.clone(), o.clone()).unwrap()
}

pub fn randn_maps<R: Real>(c: usize, b: usize, h: usize, w: usize, rng: &mut impl Rng) -> Maps<R> {
    let mut m = Maps::zeros(c, b, h, w);
    for v in m.data.iter_mut() {
        let x: f64 = rng.sample(StandardNormal);
        *v = R::lit(x);
    }
    m
}

pub fn unit_rows<R: Real>(n: usize, d: usize, rng: &mut impl Rng) -> Mat<R> {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    Mat::from_rows(&rows)
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely against it.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Central-difference check of the gradients stored in `net` against
/// `loss`, on `picks` randomly chosen (tensor, element) slices. Returns the
/// worst relative error with its location.
pub fn check_param_grads<N: Module<f64> + Clone>(
    net: &N,
    loss: impl Fn(&N) -> f64,
    picks: usize,
    rng: &mut impl Rng,
) -> (f64, String) {
    let names: Vec<(String, usize)> = net.params().into_iter().map(|(n, p)| (n, p.len())).collect();
    let mut worst = (0.0, String::new());
    for _ in 0..picks {
        let (name, len) = &names[rng.random_range(0..names.len())];
        let i = rng.random_range(0..*len);
        let analytic = grad_of(net, name)[i];
        let eval = |delta: f64| {
            let mut n = net.clone();
            for (pn, p) in n.params_mut() {
                if &pn == name {
                    p.value[i] += delta;
                }
            }
            loss(&n)
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        let e = rel_err(analytic, numeric);
        if e > worst.0 {
            worst = (e, format!("{name}[{i}] analytic {analytic:.9e} numeric {numeric:.9e}"));
        }
    }
    worst
}

pub fn grad_of<N: Module<f64>>(net: &N, name: &str) -> Vec<f64> {
    net.params().into_iter().find(|(n, _)| n == name).map(|(_, p)| p.grad.clone()).expect("parameter exists")
}
