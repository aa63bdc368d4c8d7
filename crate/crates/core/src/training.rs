//! Adversarial training loop with contrastive regularizers, in
//! language-free (fixed or learned perturbation), supervised and
//! semi-supervised modes, with exact checkpoint/resume.

use crate::archive::Archive;
use crate::error::{ensure_dim, Error, Result};
use crate::features::{extract_image_features, normalize, AugmentSpec, EncoderPair, FeatureVector, PixelEncoder};
use crate::gan::{DiscriminatorNet, GanConfig, GeneratorNet};
use crate::losses::{contrastive_with_grad, discriminator_adv, generator_adv, total_losses, LossParts, LossWeights};
use crate::nn::{Adam, AdamConfig, CropResize, Maps, Mat, Module, Moments, Real};
use crate::pseudo::{pseudo_fixed, FixedPerturbSpec, InferenceModel};
use crate::raster::{batch_to_maps, Image};
use crate::toyset::ToyDataset;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    LanguageFreeFixed,
    LanguageFreeTrainable,
    Supervised,
    SemiSupervised,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Fraction of images that keep their real caption (semi-supervised).
    pub pair_fraction: f64,
    pub batch: usize,
    pub steps: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub loss: LossWeights,
    pub perturb: FixedPerturbSpec,
    /// Crop augmentation when extracting image features for pseudo text.
    pub pseudo_aug: AugmentSpec,
    /// Crop applied to generated images before the frozen image encoder.
    pub con_aug: AugmentSpec,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Decay of the moving average of generator weights used for sampling
    /// (0 disables the average).
    pub ema_decay: f64,
    pub gan: GanConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::LanguageFreeFixed,
            pair_fraction: 0.0,
            batch: 64,
            steps: 3000,
            lr_g: 2.5e-3,
            lr_d: 2.5e-3,
            beta1: 0.0,
            beta2: 0.99,
            loss: LossWeights::language_free(),
            perturb: FixedPerturbSpec::default(),
            pseudo_aug: AugmentSpec::identity(32),
            con_aug: AugmentSpec { k: 1, a: 16, w: 32 },
            seed: 0,
            checkpoint_every: 0,
            ema_decay: 0.99,
            gan: GanConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for `mode`, with the supervised contrastive weight where
    /// real captions are used throughout.
    pub fn for_mode(mode: Mode) -> Self {
        let loss = match mode {
            Mode::Supervised => LossWeights::supervised(),
            _ => LossWeights::language_free(),
        };
        Self { mode, loss, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.perturb.validate()?;
        self.pseudo_aug.validate()?;
        self.con_aug.validate()?;
        self.gan.validate()?;
        if !(0.0..=1.0).contains(&self.pair_fraction) {
            return Err(Error::Config(format!("pair_fraction must lie in [0, 1], got {}", self.pair_fraction)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.batch < 2 && (self.loss.gam > 0.0 || self.loss.lam > 0.0) {
            return Err(Error::Config("contrastive terms need a batch of at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("momentum coefficients must lie in [0, 1)".into()));
        }
        let side = self.gan.image_side();
        if self.pseudo_aug.w != side || self.con_aug.w != side {
            return Err(Error::Config(format!("augmentation width must equal the image side {side}")));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8 }
    }
}

/// One step's loss components. `L_ConD` is measured on real images in the
/// discriminator update, `L_ConD_fake` on generated ones in the generator
/// update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    #[serde(rename = "L_G")]
    pub l_g: f64,
    #[serde(rename = "L_D")]
    pub l_d: f64,
    #[serde(rename = "L_ConD")]
    pub l_con_d: f64,
    #[serde(rename = "L_ConG")]
    pub l_con_g: f64,
    #[serde(rename = "L_ConD_fake")]
    pub l_con_d_fake: f64,
    #[serde(rename = "L_G_total")]
    pub l_g_total: f64,
    #[serde(rename = "L_D_total")]
    pub l_d_total: f64,
}

/// Everything a training run reads besides its configuration.
pub struct TrainInputs<'a> {
    pub data: &'a ToyDataset,
    pub encoders: EncoderPair,
    /// Frozen pixel image encoder that scores generated images.
    pub scorer: PixelEncoder<f32>,
    /// Required in `language_free_trainable` mode.
    pub inference: Option<InferenceModel<f32>>,
}

/// A fully materialized mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub conditions: Mat<f32>,
    pub z: Mat<f32>,
    pub crops: Vec<crate::nn::CropWindow>,
}

/// Discriminator-side objective values of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscObjective {
    pub l_d: f64,
    /// Contrastive term on real images.
    pub con_d: f64,
    /// `l_d + gam * con_d`.
    pub total: f64,
}

/// Generator-side objective values of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenObjective {
    pub l_g: f64,
    /// Contrastive term of discriminator features on generated images.
    pub con_d: f64,
    /// Contrastive term of the frozen image encoder on generated crops.
    pub con_g: f64,
    /// `l_g + gam * con_d + lam * con_g`.
    pub total: f64,
}

/// Evaluate `L_D + gam * L_ConD` (contrastive term on the real images) and
/// accumulate its parameter gradients into `d`.
pub fn discriminator_objective<R: Real>(
    d: &mut DiscriminatorNet<R>,
    real: &Maps<R>,
    fake: &Maps<R>,
    h: &Mat<R>,
    w: &LossWeights,
) -> Result<DiscObjective> {
    let (out_r, cache_r) = d.forward(real, h)?;
    let (out_f, cache_f) = d.forward(fake, h)?;
    let (l_d, g_r, g_f) = discriminator_adv(&out_r.logit, &out_f.logit);
    let con = contrastive_with_grad(&out_r.fs, h, w)?;
    let mut dfs = con.d_features;
    dfs.scale(R::lit(w.gam));
    let (_, total) = total_losses(&LossParts { g: 0.0, d: l_d, con_d: con.value, con_g: 0.0 }, w)?;
    d.backward(&cache_r, &g_r, Some(&dfs), true, false);
    d.backward(&cache_f, &g_f, None, true, false);
    Ok(DiscObjective { l_d, con_d: con.value, total })
}

/// Evaluate `L_G + gam * L_ConD + lam * L_ConG` on generated images with the
/// discriminator and image encoder frozen; returns the gradient with
/// respect to the images.
pub fn generator_objective<R: Real>(
    d: &mut DiscriminatorNet<R>,
    scorer: &mut PixelEncoder<R>,
    fake: &Maps<R>,
    h: &Mat<R>,
    crop: &CropResize,
    w: &LossWeights,
) -> Result<(GenObjective, Maps<R>)> {
    let (out, cache) = d.forward(fake, h)?;
    let (l_g, dlogit) = generator_adv(&out.logit);
    let con_d = contrastive_with_grad(&out.fs, h, w)?;
    let mut dfs = con_d.d_features;
    dfs.scale(R::lit(w.gam));
    let mut dimg = d.backward(&cache, &dlogit, Some(&dfs), false, true).expect("image gradient");

    let (feat, ecache) = scorer.forward(&crop.forward(fake));
    let con_g = contrastive_with_grad(&feat, h, w)?;
    let mut dfeat = con_g.d_features;
    dfeat.scale(R::lit(w.lam));
    let dcrop = scorer.backward(&ecache, &dfeat, false, true).expect("crop gradient");
    dimg.add_assign(&crop.backward(&dcrop, fake.w));

    let parts = LossParts { g: l_g, d: 0.0, con_d: con_d.value, con_g: con_g.value };
    let (total, _) = total_losses(&parts, w)?;
    Ok((GenObjective { l_g, con_d: con_d.value, con_g: con_g.value, total }, dimg))
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub generator: GeneratorNet<f32>,
    /// Moving average of `generator` weights.
    pub generator_ema: GeneratorNet<f32>,
    pub discriminator: DiscriminatorNet<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub step: u64,
    rng: ChaCha8Rng,
    data: &'a ToyDataset,
    scorer: PixelEncoder<f32>,
    inference: Option<InferenceModel<f32>>,
    image_feats: Vec<FeatureVector>,
    /// Unit caption features of images that keep their caption.
    text_feats: Vec<Option<Vec<f64>>>,
}

const STREAM_INIT: u64 = 1;
const STREAM_PAIRS: u64 = 2;
const STREAM_FEATURES: u64 = 3;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

/// Images that keep their real caption: all in supervised mode, none in
/// language-free modes, and a seeded subset of `round(fraction * n)` in
/// semi-supervised mode.
pub fn paired_rows(mode: Mode, pair_fraction: f64, n: usize, seed: u64) -> BTreeSet<usize> {
    match mode {
        Mode::Supervised => (0..n).collect(),
        Mode::LanguageFreeFixed | Mode::LanguageFreeTrainable => BTreeSet::new(),
        Mode::SemiSupervised => {
            let k = ((pair_fraction * n as f64).round() as usize).min(n);
            sample(&mut stream(seed, STREAM_PAIRS), n, k).into_iter().collect()
        }
    }
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, inputs: TrainInputs<'a>) -> Result<Self> {
        config.validate()?;
        let mut init = stream(config.seed, STREAM_INIT);
        let generator = GeneratorNet::new(&config.gan, &mut init);
        let discriminator = DiscriminatorNet::new(&config.gan, &mut init);
        Self::assemble(config, inputs, generator, discriminator)
    }

    fn assemble(
        config: TrainConfig,
        inputs: TrainInputs<'a>,
        generator: GeneratorNet<f32>,
        discriminator: DiscriminatorNet<f32>,
    ) -> Result<Self> {
        let TrainInputs { data, encoders, scorer, inference } = inputs;
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let d = config.gan.d;
        ensure_dim(d, encoders.d())?;
        ensure_dim(d, scorer.d())?;
        let side = config.gan.image_side();
        if data.image(0).side != side {
            return Err(Error::Config(format!("dataset images are {}px, generator emits {side}px", data.image(0).side)));
        }
        if config.mode == Mode::LanguageFreeTrainable {
            let m = inference
                .as_ref()
                .ok_or_else(|| Error::Config("language_free_trainable mode needs an inference model".into()))?;
            ensure_dim(d, m.d())?;
        }
        let images: Vec<&Image> = (0..data.len()).map(|i| data.image(i)).collect();
        let mut frng = stream(config.seed, STREAM_FEATURES);
        let image_feats = extract_image_features(&images, encoders.image.as_ref(), Some(&config.pseudo_aug), &mut frng)?;
        let paired = paired_rows(config.mode, config.pair_fraction, data.len(), config.seed);
        let mut text_feats = vec![None; data.len()];
        for &i in &paired {
            let caption = data.caption(i);
            if caption.trim().is_empty() {
                return Err(Error::Data(format!("sample {i} has no caption but is trained with one")));
            }
            let t = encoders.text.encode_text(caption)?;
            text_feats[i] = Some(normalize(&t)?.values().to_vec());
        }
        Ok(Self {
            opt_g: Adam::new(config.adam(config.lr_g)),
            opt_d: Adam::new(config.adam(config.lr_d)),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
            config,
            generator_ema: generator.clone(),
            generator,
            discriminator,
            data,
            scorer,
            inference,
            image_feats,
            text_feats,
        })
    }

    /// Number of images that use their real caption.
    pub fn paired_count(&self) -> usize {
        self.text_feats.iter().filter(|t| t.is_some()).count()
    }

    /// Draw the next batch: indices, noise, latents and crop windows are
    /// drawn in that order in every mode.
    pub fn next_batch(&mut self) -> Result<Batch> {
        let n = self.config.batch;
        let d = self.config.gan.d;
        let indices: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..self.data.len())).collect();
        let eps = Mat::<f32>::randn(n, d, &mut self.rng);
        let z = Mat::<f32>::randn(n, self.config.gan.z_dim, &mut self.rng);
        let crops = (0..n).map(|_| self.config.con_aug.sample_window(&mut self.rng)).collect();

        let mut conditions = Mat::<f32>::zeros(n, d);
        let learned = match (&self.inference, self.config.mode) {
            (Some(m), Mode::LanguageFreeTrainable) => {
                let f = Mat::from_rows(&indices.iter().map(|&i| self.image_feats[i].values.clone()).collect::<Vec<_>>());
                Some(m.forward(&f, &eps)?.0)
            }
            _ => None,
        };
        for (r, &i) in indices.iter().enumerate() {
            let row: Vec<f64> = match (&self.text_feats[i], &learned) {
                (Some(t), _) => t.clone(),
                (None, Some(h)) => h.row(r).to_vec(),
                (None, None) => pseudo_fixed(&self.image_feats[i], &self.config.perturb, &eps.row_f64(r))?.values().to_vec(),
            };
            conditions.row_mut(r).iter_mut().zip(&row).for_each(|(o, &v)| *o = v as f32);
        }
        Ok(Batch { indices, conditions, z, crops })
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let batch = self.next_batch()?;
        let w = self.config.loss;
        let h = &batch.conditions;
        let images: Vec<&Image> = batch.indices.iter().map(|&i| self.data.image(i)).collect();
        let real = batch_to_maps::<f32>(&images)?;
        let (fake, gcache) = self.generator.forward(&batch.z, h)?;

        self.discriminator.zero_grad();
        let dobj = discriminator_objective(&mut self.discriminator, &real, &fake, h, &w)?;
        self.opt_d.step(&mut self.discriminator);

        self.generator.zero_grad();
        let crop = CropResize::new(batch.crops.clone(), self.config.con_aug.w);
        let (gobj, dimg) = generator_objective(&mut self.discriminator, &mut self.scorer, &fake, h, &crop, &w)?;
        self.generator.backward(&gcache, &dimg);
        self.opt_g.step(&mut self.generator);
        self.update_ema();

        if !(self.generator.params_finite() && self.discriminator.params_finite()) {
            return Err(Error::Numerical(format!("parameters became non-finite at step {}", self.step + 1)));
        }
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            l_g: gobj.l_g,
            l_d: dobj.l_d,
            l_con_d: dobj.con_d,
            l_con_g: gobj.con_g,
            l_con_d_fake: gobj.con_d,
            l_g_total: gobj.total,
            l_d_total: dobj.total,
        })
    }

    /// Generator used for sampling: the weight average when enabled.
    pub fn sampler(&self) -> &GeneratorNet<f32> {
        if self.config.ema_decay > 0.0 {
            &self.generator_ema
        } else {
            &self.generator
        }
    }

    fn update_ema(&mut self) {
        let decay = self.config.ema_decay as f32;
        if decay == 0.0 {
            return;
        }
        let src = self.generator.params();
        for ((_, dst), (_, p)) in self.generator_ema.params_mut().into_iter().zip(src) {
            dst.value.iter_mut().zip(&p.value).for_each(|(e, &v)| *e = decay * *e + (1.0 - decay) * v);
        }
    }

    pub fn checkpoint(&self) -> Result<Archive> {
        let meta = serde_json::json!({
            "kind": "gan_checkpoint",
            "step": self.step,
            "config": self.config,
            "rng": serde_json::to_string(&self.rng)?,
            "opt_g_t": self.opt_g.t,
            "opt_d_t": self.opt_d.t,
        });
        let mut a = Archive::new(meta);
        a.put_module("g", &self.generator);
        a.put_module("g_ema", &self.generator_ema);
        a.put_module("d", &self.discriminator);
        put_adam(&mut a, "opt_g", &self.opt_g);
        put_adam(&mut a, "opt_d", &self.opt_d);
        if let Some(m) = &self.inference {
            a.put_module("inference", m);
        }
        Ok(a)
    }

    /// Restore networks, optimizer moments, step counter and RNG position
    /// from `ckpt`. The checkpoint's network architecture must match
    /// `config.gan`.
    pub fn from_checkpoint(config: TrainConfig, mut inputs: TrainInputs<'a>, ckpt: &Archive) -> Result<Self> {
        config.validate()?;
        let meta = CheckpointMeta::parse(ckpt)?;
        if meta.config.gan != config.gan {
            return Err(Error::Checkpoint("checkpoint network architecture differs from the configuration".into()));
        }
        let (generator, discriminator) = load_networks(ckpt, &config.gan)?;
        if ckpt.has_prefix("inference") && inputs.inference.is_none() {
            let mut m = InferenceModel::new(config.gan.d, &mut ChaCha8Rng::seed_from_u64(0));
            ckpt.load_module("inference", &mut m)?;
            inputs.inference = Some(m);
        }
        let mut t = Self::assemble(config, inputs, generator, discriminator)?;
        if ckpt.has_prefix("g_ema") {
            ckpt.load_module("g_ema", &mut t.generator_ema)?;
        }
        t.step = meta.step;
        t.rng = serde_json::from_str(&meta.rng).map_err(|e| Error::Checkpoint(format!("rng state: {e}")))?;
        t.opt_g = load_adam(ckpt, "opt_g", t.config.adam(t.config.lr_g), meta.opt_g_t, &t.generator)?;
        t.opt_d = load_adam(ckpt, "opt_d", t.config.adam(t.config.lr_d), meta.opt_d_t, &t.discriminator)?;
        Ok(t)
    }
}

struct CheckpointMeta {
    step: u64,
    config: TrainConfig,
    rng: String,
    opt_g_t: u64,
    opt_d_t: u64,
}

impl CheckpointMeta {
    fn parse(a: &Archive) -> Result<Self> {
        let bad = |what: &str| Error::Checkpoint(format!("checkpoint metadata lacks {what}"));
        if a.meta.get("kind").and_then(|v| v.as_str()) != Some("gan_checkpoint") {
            return Err(Error::Checkpoint("archive is not a GAN checkpoint".into()));
        }
        let config = serde_json::from_value(a.meta.get("config").cloned().ok_or_else(|| bad("config"))?)
            .map_err(|e| Error::Checkpoint(format!("checkpoint config: {e}")))?;
        Ok(Self {
            step: a.meta.get("step").and_then(|v| v.as_u64()).ok_or_else(|| bad("step"))?,
            config,
            rng: a.meta.get("rng").and_then(|v| v.as_str()).ok_or_else(|| bad("rng"))?.to_string(),
            opt_g_t: a.meta.get("opt_g_t").and_then(|v| v.as_u64()).ok_or_else(|| bad("opt_g_t"))?,
            opt_d_t: a.meta.get("opt_d_t").and_then(|v| v.as_u64()).ok_or_else(|| bad("opt_d_t"))?,
        })
    }
}

/// Training step recorded in a checkpoint.
pub fn checkpoint_step(a: &Archive) -> Result<u64> {
    Ok(CheckpointMeta::parse(a)?.step)
}

/// Network configuration stored in a checkpoint.
pub fn checkpoint_config(a: &Archive) -> Result<TrainConfig> {
    Ok(CheckpointMeta::parse(a)?.config)
}

/// Generator and discriminator stored in a checkpoint.
pub fn load_networks(a: &Archive, gan: &GanConfig) -> Result<(GeneratorNet<f32>, DiscriminatorNet<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = GeneratorNet::new(gan, &mut rng);
    let mut d = DiscriminatorNet::new(gan, &mut rng);
    a.load_module("g", &mut g)?;
    a.load_module("d", &mut d)?;
    Ok((g, d))
}

/// Sampling generator of a checkpoint (the weight average when the run kept
/// one), using the architecture recorded in it.
pub fn load_generator(a: &Archive) -> Result<GeneratorNet<f32>> {
    let cfg = checkpoint_config(a)?;
    let mut g = load_networks(a, &cfg.gan)?.0;
    if cfg.ema_decay > 0.0 && a.has_prefix("g_ema") {
        a.load_module("g_ema", &mut g)?;
    }
    Ok(g)
}

fn put_adam(a: &mut Archive, prefix: &str, opt: &Adam<f32>) {
    for (name, m) in &opt.state {
        a.put(format!("{prefix}.m/{name}"), vec![m.m.len()], m.m.clone());
        a.put(format!("{prefix}.v/{name}"), vec![m.v.len()], m.v.clone());
    }
}

fn load_adam(a: &Archive, prefix: &str, config: AdamConfig, t: u64, net: &dyn Module<f32>) -> Result<Adam<f32>> {
    let mut opt = Adam::new(config);
    opt.t = t;
    if t == 0 {
        return Ok(opt);
    }
    for (name, p) in net.params() {
        let m = a.get(&format!("{prefix}.m/{name}"))?;
        let v = a.get(&format!("{prefix}.v/{name}"))?;
        if m.data.len() != p.len() || v.data.len() != p.len() {
            return Err(Error::Checkpoint(format!("optimizer state for {name} has the wrong size")));
        }
        opt.state.insert(name, Moments { m: m.data.clone(), v: v.data.clone() });
    }
    Ok(opt)
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    /// Directory for periodic and final checkpoints.
    pub dir: Option<PathBuf>,
    /// JSON-lines metrics log.
    pub metrics: Option<PathBuf>,
}

pub const FINAL_CHECKPOINT: &str = "final.lfck";

pub fn checkpoint_name(step: u64) -> String {
    format!("step{step:06}.lfck")
}

/// Run `config.steps` training steps, starting from `init` when given.
/// Returns the final checkpoint and per-step reports. On a numerical error
/// the run stops; checkpoints already written are left untouched.
pub fn train(
    config: TrainConfig,
    inputs: TrainInputs<'_>,
    init: Option<&Archive>,
    outputs: &RunOutputs,
) -> Result<(Archive, Vec<StepReport>)> {
    let steps = config.steps;
    let every = config.checkpoint_every;
    let mut trainer = match init {
        Some(a) => Trainer::from_checkpoint(config, inputs, a)?,
        None => Trainer::new(config, inputs)?,
    };
    if let Some(dir) = &outputs.dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log = match &outputs.metrics {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let mut reports = Vec::with_capacity(steps);
    for _ in 0..steps {
        let r = trainer.train_step()?;
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &r)?;
            w.write_all(b"\n")?;
        }
        reports.push(r);
        if let (Some(dir), true) = (&outputs.dir, every > 0 && trainer.step % every as u64 == 0) {
            trainer.checkpoint()?.save(&dir.join(checkpoint_name(trainer.step)))?;
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    let ckpt = match (init, steps) {
        (Some(a), 0) => a.clone(),
        _ => trainer.checkpoint()?,
    };
    if let Some(dir) = &outputs.dir {
        ckpt.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok((ckpt, reports))
}

/// Read a metrics log written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepReport>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
