//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always reach stdout.
//!
//! Criteria 7 to 9 train full toy GANs and take most of the runtime.

mod common;

use common::*;
use langfree::eval::{
    conditional_accuracy, fid, fid_images, fid_k, inception_score, train_probe, AttributeProbe, CondAccReport,
    GaussianStats, ProbeTrainConfig,
};
use langfree::features::{
    normalize, train_encoder_pair, EncoderPair, EncoderTrainConfig, FeatureVector, PixelEncoder, TextEncoder, TextTarget,
};
use langfree::gan::{DiscriminatorNet, GanConfig, GeneratorNet};
use langfree::losses::{contrastive, contrastive_with_grad, LossWeights};
use langfree::nn::{CropResize, CropWindow, Mat, Module};
use langfree::pseudo::{
    calibrate_density, perturb_fixed, pointwise_lower_bound, pseudo_fixed, pseudo_trainable, sample_noise,
    theorem1_mc_check, BoundQuery, FixedPerturbSpec, InferenceModel,
};
use langfree::raster::Image;
use langfree::reference::{NOT_REPRODUCED, REFERENCE_RESULTS};
use langfree::toyset::{gen_dataset, oracle_encoders, OracleEncoders, ToyDataset};
use langfree::training::{discriminator_objective, generator_objective, Mode, TrainConfig, TrainInputs, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use std::time::{Duration, Instant};

const THEOREM_TRIALS: usize = 100_000;
const THEOREM_TIME_LIMIT: Duration = Duration::from_secs(60);
const CALIBRATION_DIMS: [usize; 3] = [2, 3, 8];
const CALIBRATION_SAMPLES: usize = 100_000;
const POINTWISE_DRAWS: usize = 10_000;
const POINTWISE_SLACK: f64 = 1e-9;
const PSEUDO_DRAWS: usize = 10_000;
const UNIT_TOL: f64 = 1e-6;
const EXAMPLE_TOL: f64 = 1e-6;
const DECOMP_PAIRS: usize = 100;
const DECOMP_TOL: f64 = 1e-5;
const METRIC_TOL: f64 = 1e-6;

const FEATURE_D: usize = 64;
const TRAIN_SAMPLES: usize = 10_000;
const HOLDOUT: usize = 1_000;
const PROMPTS: usize = 512;
const BATCH: usize = 64;
const STEPS: usize = 750;
/// Longer horizon reported alongside the ablation, not judged.
const LONG_STEPS: usize = 2_000;
const LF_MIN_ACC: f64 = 0.80;
const SUPERVISED_MIN_ACC: f64 = 0.90;
const FID_RATIO_MAX: f64 = 1.5;
const MONOTONE_BAND: f64 = 0.03;
const ABLATION_MIN_DROP: f64 = 0.10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn theorem_grid() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cal = calibrate_density(&CALIBRATION_DIMS, CALIBRATION_SAMPLES, &mut rng).unwrap();
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let mut cells = 0;
    for d in [2, 8, 64, 512] {
        for xi in [0.1, 0.5, 1.0] {
            for c in [0.3, 0.7, 0.9] {
                let r = theorem1_mc_check(&BoundQuery { c, xi, d }, THEOREM_TRIALS, &mut rng, cal.selected).unwrap();
                cells += 1;
                if !r.passed {
                    failures.push(format!("d={d} xi={xi} c={c}: p={:.4} bound={:.4}", r.empirical_prob, r.bound));
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        failures.is_empty() && elapsed < THEOREM_TIME_LIMIT,
        format!("{cells} cells, density {:?}, {:.1}s, failures {failures:?}", cal.selected, elapsed.as_secs_f64()),
    )
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pointwise_bound() -> Outcome {
    let (d, xi) = (64, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let spec = FixedPerturbSpec { xi };
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..POINTWISE_DRAWS {
        let f = sample_noise(d, &mut rng);
        let eps = sample_noise(d, &mut rng);
        let h = pseudo_fixed(&FeatureVector::new(f.clone()).unwrap(), &spec, &eps).unwrap();
        let sim = dot(&unit(&f), h.values());
        let bound = pointwise_lower_bound(dot(&unit(&f), &unit(&eps)), xi);
        worst = worst.min(sim - bound);
        violations += (sim < bound - POINTWISE_SLACK) as usize;
    }
    outcome(violations == 0, format!("{POINTWISE_DRAWS} draws, {violations} violations, min margin {worst:.3e}"))
}

fn pseudo_invariants() -> Outcome {
    let d = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = InferenceModel::<f64>::new(d, &mut rng);
    let spec = FixedPerturbSpec { xi: 0.3 };
    let (mut norm_err, mut mag_err, mut xi0_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..PSEUDO_DRAWS {
        let scale = rng.random_range(0.1..10.0);
        let f: Vec<f64> = sample_noise(d, &mut rng).into_iter().map(|v| v * scale).collect();
        let fv = FeatureVector::new(f.clone()).unwrap();
        let eps = sample_noise(d, &mut rng);
        let fixed = pseudo_fixed(&fv, &spec, &eps).unwrap();
        let learned = pseudo_trainable(&fv, &model, &eps).unwrap();
        for h in [&fixed, &learned] {
            norm_err = norm_err.max((dot(h.values(), h.values()).sqrt() - 1.0).abs());
        }
        let raw = perturb_fixed(&fv, &spec, &eps).unwrap();
        let delta: Vec<f64> = raw.iter().zip(&f).map(|(a, b)| a - b).collect();
        let target = spec.xi * fv.norm();
        mag_err = mag_err.max((dot(&delta, &delta).sqrt() - target).abs() / target);
        let h0 = pseudo_fixed(&fv, &FixedPerturbSpec { xi: 0.0 }, &eps).unwrap();
        let n0 = normalize(&fv).unwrap();
        xi0_err = xi0_err.max(h0.values().iter().zip(n0.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    outcome(
        norm_err <= UNIT_TOL && mag_err <= UNIT_TOL && xi0_err == 0.0,
        format!("{PSEUDO_DRAWS} draws: unit-norm error {norm_err:.2e}, magnitude error {mag_err:.2e}, xi=0 error {xi0_err:.1e}"),
    )
}

fn plain(tau: f64) -> LossWeights {
    LossWeights { tau, sharpen: false, ..LossWeights::language_free() }
}

fn loss_examples() -> Vec<(String, f64)> {
    let single = contrastive(&Mat::<f64>::from_rows(&[[0.3, -1.2, 2.0]]), &Mat::<f64>::from_rows(&[[1.0, 0.5, 0.0]]), &plain(0.5))
        .unwrap();
    let f4 = Mat::<f64>::from_rows(&[[1.0, 1.0]; 4]);
    let h4 = Mat::<f64>::from_rows(&[[1.0, -3.0]; 4]);
    let uniform = contrastive(&f4, &h4, &plain(0.7)).unwrap() - 0.7 * 4.0 * 4f64.ln();
    let e = Mat::<f64>::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
    let col = -0.5 * (2f64.exp() / (2f64.exp() + 1.0)).ln();
    let identity = contrastive(&e, &e, &plain(0.5)).unwrap() - 2.0 * col;
    vec![("n=1".into(), single), ("uniform".into(), uniform), ("identity".into(), identity)]
}

fn tiny_objective_inputs(rng: &mut ChaCha8Rng) -> (GeneratorNet<f64>, DiscriminatorNet<f64>, PixelEncoder<f64>, Mat<f64>, Mat<f64>, CropResize) {
    let cfg = tiny_gan();
    let side = cfg.image_side();
    let g = GeneratorNet::new(&cfg, rng);
    let d = DiscriminatorNet::new(&cfg, rng);
    let scorer = small_scorer(rng.random());
    let z = Mat::randn(3, cfg.z_dim, rng);
    let h = unit_rows(3, cfg.d, rng);
    let windows = (0..3)
        .map(|_| {
            let s = rng.random_range(4..=side);
            CropWindow { x0: rng.random_range(0..=side - s), y0: rng.random_range(0..=side - s), side: s }
        })
        .collect();
    (g, d, scorer, z, h, CropResize::new(windows, side))
}

fn loss_correctness() -> Outcome {
    let examples = loss_examples();
    let worst_example = examples.iter().map(|(_, e)| e.abs()).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst_grad = 0.0f64;
    for sharpen in [false, true] {
        let w = LossWeights { sharpen, ..LossWeights::language_free() };
        let f = Mat::<f64>::randn(5, 7, &mut rng);
        let h = Mat::<f64>::randn(5, 7, &mut rng);
        let out = contrastive_with_grad(&f, &h, &w).unwrap();
        for _ in 0..10 {
            let k = rng.random_range(0..f.data.len());
            let at = |s: f64| {
                let mut m = f.clone();
                m.data[k] += s;
                contrastive(&m, &h, &w).unwrap()
            };
            worst_grad = worst_grad.max(rel_err(out.d_features.data[k], (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP)));
        }

        let (g, d, mut scorer, z, h, crop) = tiny_objective_inputs(&mut rng);
        let real = randn_maps(3, 3, g.config.image_side(), g.config.image_side(), &mut rng);
        let (fake, _) = g.forward(&z, &h).unwrap();
        let mut dn = d.clone();
        dn.zero_grad();
        discriminator_objective(&mut dn, &real, &fake, &h, &w).unwrap();
        let dloss = |n: &DiscriminatorNet<f64>| discriminator_objective(&mut n.clone(), &real, &fake, &h, &w).unwrap().total;
        worst_grad = worst_grad.max(check_param_grads(&dn, dloss, 20, &mut rng).0);

        let objective = |g: &GeneratorNet<f64>| {
            let (fake, cache) = g.forward(&z, &h).unwrap();
            let (obj, dimg) = generator_objective(&mut d.clone(), &mut scorer.clone(), &fake, &h, &crop, &w).unwrap();
            (obj.total, dimg, cache)
        };
        let mut gn = g.clone();
        gn.zero_grad();
        let (_, dimg, cache) = objective(&gn);
        gn.backward(&cache, &dimg);
        worst_grad = worst_grad.max(check_param_grads(&gn, |n| objective(n).0, 20, &mut rng).0);
        scorer.zero_grad();
    }
    outcome(
        worst_example <= EXAMPLE_TOL && worst_grad < GRAD_REL_TOL,
        format!("worst example error {worst_example:.2e}, worst gradient relative error {worst_grad:.2e}"),
    )
}

fn discriminator_decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = GanConfig::default();
    let side = cfg.image_side();
    let d = DiscriminatorNet::<f64>::new(&cfg, &mut rng);
    let (mut id_err, mut lin_err) = (0.0f64, 0.0f64);
    for _ in 0..DECOMP_PAIRS {
        let x = randn_maps::<f64>(3, 1, side, side, &mut rng);
        let h1 = unit_rows::<f64>(1, cfg.d, &mut rng);
        let h2 = unit_rows::<f64>(1, cfg.d, &mut rng);
        let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mut mix = h1.clone();
        mix.data.iter_mut().zip(&h2.data).for_each(|(m, v)| *m = a * *m + b * v);
        let (o1, _) = d.forward(&x, &h1).unwrap();
        let (o2, _) = d.forward(&x, &h2).unwrap();
        let (om, _) = d.forward(&x, &mix).unwrap();
        let fd = o1.fd[0];
        id_err = id_err.max((o1.logit[0] - fd - dot(o1.fs.row(0), h1.row(0))).abs());
        let expect = fd + a * (o1.logit[0] - fd) + b * (o2.logit[0] - fd);
        lin_err = lin_err.max((om.logit[0] - expect).abs());
    }
    outcome(
        id_err <= DECOMP_TOL && lin_err <= DECOMP_TOL,
        format!("{DECOMP_PAIRS} pairs: identity error {id_err:.2e}, linearity error {lin_err:.2e}"),
    )
}

fn metric_oracles() -> Outcome {
    let d = 6;
    let mut eye = vec![0.0; d * d];
    (0..d).for_each(|i| eye[i * d + i] = 1.0);
    let mu = vec![0.5, -1.0, 2.0, 0.0, 0.25, 3.0];
    let fid_gauss = fid(&GaussianStats::new(vec![0.0; d], eye.clone()).unwrap(), &GaussianStats::new(mu.clone(), eye).unwrap())
        .unwrap();
    let fid_err = (fid_gauss - dot(&mu, &mu)).abs();

    let c = 8;
    let uniform = Mat::<f64>::from_vec(10 * c, c, vec![1.0 / c as f64; 10 * c * c]);
    let mut onehot = Mat::<f64>::zeros(10 * c, c);
    (0..10 * c).for_each(|i| onehot.data[i * c + i % c] = 1.0);
    let is_uniform_err = (inception_score(&uniform, 10).unwrap().0 - 1.0).abs();
    let is_onehot_err = (inception_score(&onehot, 10).unwrap().0 - c as f64).abs();

    let data = gen_dataset(60, 16).unwrap();
    let imgs: Vec<&Image> = (0..data.len()).map(|i| data.image(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let extractor = PixelEncoder::<f32>::new(&[langfree::nn::Stage { channels: 8, stride: 2 }], 8, &mut rng);
    let (a, b) = imgs.split_at(30);
    let exact = fid_k(a, b, 0, &extractor).unwrap() == fid_images(a, b, &extractor).unwrap();
    outcome(
        fid_err <= METRIC_TOL && is_uniform_err <= METRIC_TOL && is_onehot_err <= METRIC_TOL && exact,
        format!(
            "FID error {fid_err:.2e}, IS uniform error {is_uniform_err:.2e}, IS one-hot error {is_onehot_err:.2e}, fid_k(0) == fid: {exact}"
        ),
    )
}

/// Shared fixtures for the end-to-end runs.
struct Bench {
    train: ToyDataset,
    holdout: ToyDataset,
    oracle: Arc<OracleEncoders>,
    scorer: PixelEncoder<f32>,
    extractor: PixelEncoder<f32>,
    probe: AttributeProbe,
    prompts: Vec<String>,
}

struct RunResult {
    acc: CondAccReport,
    fid: f64,
}

impl Bench {
    fn new() -> Self {
        let data = gen_dataset(TRAIN_SAMPLES + HOLDOUT, 1).unwrap();
        let (train, holdout) = data.split_tail(HOLDOUT);
        let oracle = Arc::new(oracle_encoders(FEATURE_D, 7).unwrap());
        let frozen = || TextTarget::Frozen(oracle.clone());
        let (scorer, _, _) = train_encoder_pair(&train, &holdout, frozen(), &EncoderTrainConfig::default()).unwrap();
        let fid_cfg = EncoderTrainConfig { seed: 1, ..EncoderTrainConfig::default() };
        let (extractor, _, _) = train_encoder_pair(&train, &holdout, frozen(), &fid_cfg).unwrap();
        let (probe, report) = train_probe(&train, &holdout, &ProbeTrainConfig::default()).unwrap();
        println!("probe accuracy on held-out real images: {:.3}", report.eval_accuracy);
        let prompts = (0..PROMPTS).map(|i| holdout.attributes(i).caption()).collect();
        Self { train, holdout, oracle, scorer, extractor, probe, prompts }
    }

    fn config(mode: Mode, pair_fraction: f64) -> TrainConfig {
        TrainConfig { pair_fraction, batch: BATCH, steps: STEPS, ..TrainConfig::for_mode(mode) }
    }

    fn trainer(&self, config: TrainConfig) -> Trainer<'_> {
        let encoders = EncoderPair::new(self.oracle.clone(), self.oracle.clone()).unwrap();
        Trainer::new(config, TrainInputs { data: &self.train, encoders, scorer: self.scorer.clone(), inference: None })
            .unwrap()
    }

    fn generate_holdout(&self, g: &GeneratorNet<f32>) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut out = Vec::with_capacity(self.holdout.len());
        let captions: Vec<String> = (0..self.holdout.len()).map(|i| self.holdout.caption(i).to_string()).collect();
        for chunk in captions.chunks(BATCH) {
            let rows: Vec<Vec<f64>> = chunk
                .iter()
                .map(|c| normalize(&self.oracle.encode_text(c).unwrap()).unwrap().values().to_vec())
                .collect();
            let z = Mat::<f32>::randn(chunk.len(), g.config.z_dim, &mut rng);
            out.extend(g.generate_batch(&z, &Mat::from_rows(&rows)).unwrap());
        }
        out
    }

    fn evaluate(&self, label: &str, t: &Trainer<'_>, seconds: f64) -> RunResult {
        let g = t.sampler();
        let acc = conditional_accuracy(g, self.oracle.as_ref(), &self.probe, &self.prompts, 5).unwrap();
        let fake = self.generate_holdout(g);
        let fake: Vec<&Image> = fake.iter().collect();
        let real: Vec<&Image> = (0..self.holdout.len()).map(|i| self.holdout.image(i)).collect();
        let fid = fid_images(&real, &fake, &self.extractor).unwrap();
        println!(
            "  run {label}: {} steps ({seconds:.0}s), accuracy {:.3} (shape {:.3} color {:.3} size {:.3}), FID {fid:.3}",
            t.step,
            acc.strict,
            acc.shape,
            acc.color,
            acc.size
        );
        RunResult { acc, fid }
    }

    fn advance(t: &mut Trainer<'_>, until: usize) -> f64 {
        let t0 = Instant::now();
        while t.step < until as u64 {
            t.train_step().unwrap();
        }
        t0.elapsed().as_secs_f64()
    }

    fn run(&self, label: &str, config: TrainConfig) -> (RunResult, Trainer<'_>) {
        let mut t = self.trainer(config);
        let seconds = Self::advance(&mut t, STEPS);
        (self.evaluate(label, &t, seconds), t)
    }

    /// Semi-supervised training with no pairs consumes exactly the same
    /// randomness and conditions as language-free training.
    fn semi_zero_matches_language_free(&self) -> bool {
        let short = |mode| TrainConfig { steps: 3, ..Self::config(mode, 0.0) };
        let mut a = self.trainer(short(Mode::LanguageFreeFixed));
        let mut b = self.trainer(short(Mode::SemiSupervised));
        for _ in 0..3 {
            a.train_step().unwrap();
            b.train_step().unwrap();
        }
        let values = |g: &GeneratorNet<f32>| g.params().into_iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>();
        values(a.sampler()) == values(b.sampler())
    }
}

fn report(n: usize, o: &Outcome) {
    println!("{} criterion {n}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let mut outcomes: Vec<(usize, Outcome)> = Vec::new();
    let mut record = |n: usize, o: Outcome| {
        report(n, &o);
        outcomes.push((n, o));
    };
    record(1, theorem_grid());
    record(2, pointwise_bound());
    record(3, pseudo_invariants());
    record(4, loss_correctness());
    record(5, discriminator_decomposition());
    record(6, metric_oracles());

    let bench = Bench::new();
    let (sup, _) = bench.run("supervised", Bench::config(Mode::Supervised, 0.0));
    let (lf, mut lf_trainer) = bench.run("language_free_fixed", Bench::config(Mode::LanguageFreeFixed, 0.0));
    let ratio = lf.fid / sup.fid;
    record(
        7,
        outcome(
            sup.acc.strict >= SUPERVISED_MIN_ACC && lf.acc.strict >= LF_MIN_ACC && ratio <= FID_RATIO_MAX,
            format!(
                "supervised accuracy {:.3} (>= {SUPERVISED_MIN_ACC}), language-free accuracy {:.3} (>= {LF_MIN_ACC}), FID ratio {ratio:.3} (<= {FID_RATIO_MAX})",
                sup.acc.strict, lf.acc.strict
            ),
        ),
    );

    let same = bench.semi_zero_matches_language_free();
    let (half, _) = bench.run("semi_supervised 0.5", Bench::config(Mode::SemiSupervised, 0.5));
    let (full, _) = bench.run("semi_supervised 1.0", Bench::config(Mode::SemiSupervised, 1.0));
    let accs = [lf.acc.strict, half.acc.strict, full.acc.strict];
    let monotone = accs.windows(2).all(|p| p[1] >= p[0] - MONOTONE_BAND);
    record(
        8,
        outcome(
            same && monotone,
            format!("accuracy at pair fraction 0 / 0.5 / 1.0: {accs:.3?} (band {MONOTONE_BAND}); fraction 0 identical to language-free run: {same}"),
        ),
    );

    let mut ablated = Bench::config(Mode::LanguageFreeFixed, 0.0);
    ablated.loss.gam = 0.0;
    ablated.loss.lam = 0.0;
    let label = "language_free_fixed without contrastive terms";
    let (abl, mut abl_trainer) = bench.run(label, ablated);
    let drop = lf.acc.strict - abl.acc.strict;
    record(
        9,
        outcome(drop >= ABLATION_MIN_DROP, format!("accuracy {:.3} -> {:.3}, drop {drop:.3} (>= {ABLATION_MIN_DROP})", lf.acc.strict, abl.acc.strict)),
    );

    // The toy task has 64 attribute tuples; given enough steps the projection
    // term alone also learns them, so the gap at a longer horizon is shown.
    let seconds = Bench::advance(&mut lf_trainer, LONG_STEPS);
    let lf_long = bench.evaluate("language_free_fixed", &lf_trainer, seconds);
    let seconds = Bench::advance(&mut abl_trainer, LONG_STEPS);
    let abl_long = bench.evaluate(label, &abl_trainer, seconds);
    println!(
        "info criterion 9 at {LONG_STEPS} steps: accuracy {:.3} -> {:.3}, drop {:.3}",
        lf_long.acc.strict,
        abl_long.acc.strict,
        lf_long.acc.strict - abl_long.acc.strict
    );

    let listed: Vec<String> =
        REFERENCE_RESULTS.iter().map(|r| format!("{} {} {} {}", r.setting, r.dataset, r.metric, r.value)).collect();
    record(10, outcome(!REFERENCE_RESULTS.is_empty(), format!("{}; {NOT_REPRODUCED}", listed.join(", "))));

    let failed: Vec<usize> = outcomes.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
