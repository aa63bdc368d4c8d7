use clap::{Args, Parser, Subcommand, ValueEnum};
use langfree::archive::Archive;
use langfree::eval::{
    fid_images, fid_k, inception_score, train_probe, AttributeProbe, ProbeTrainConfig, BLUR_SIGMA_PER_RADIUS,
};
use langfree::features::{
    encoders_from_archive, encoders_to_archive, extract_image_features, normalize, train_encoder_pair, AugmentSpec,
    EncoderPair, EncoderTrainConfig, FeatureStore, TextEncoder, TextTarget,
};
use langfree::gan::{MixMask, MixMode};
use langfree::nn::Mat;
use langfree::pseudo::{
    calibrate_density, theorem1_mc_check, train_inference_model, BoundQuery, DensityConvention, InferenceModel,
    InferenceTrainConfig,
};
use langfree::raster::{save_grid, Image};
use langfree::toyset::{gen_dataset, oracle_encoders, Attributes, ManifestRecord, ToyDataset};
use langfree::training::{load_generator, train, Mode, RunOutputs, TrainConfig, TrainInputs, FINAL_CHECKPOINT};
use langfree::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

const GRID_COLUMNS: usize = 8;

const TRAIN_CONFIG_KEYS: &str = "\
Config file keys (JSON object; flags override the file, the file overrides defaults):
  mode                 language_free_fixed | language_free_trainable | supervised | semi_supervised
  pair_fraction        fraction of images keeping their caption (semi_supervised)
  batch, steps         batch size and number of steps
  lr_g, lr_d           learning rates
  beta1, beta2         optimizer momentum coefficients
  loss                 {tau, lam, gam, sharpen, sharpen_clamp}
  perturb              {xi}
  pseudo_aug           {k, a, w} crops for pseudo text features
  con_aug              {k, a, w} crops of generated images
  seed                 all randomness
  checkpoint_every     checkpoint cadence in steps (0 disables)
  ema_decay            sampling generator weight average (0 disables)
  gan                  {z_dim, w_dim, mapping_layers, d, cond_hidden, g_channels, base, u_gain, d_stages}";
const DEFAULT_ORACLE_SEED: u64 = 7;
const DEFAULT_D: usize = 64;

#[derive(Parser)]
#[command(name = "langfree", version, about = "Language-free text-to-image GAN training on a toy domain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a toy dataset (PNG files plus manifest.jsonl).
    GenData(GenDataArgs),
    /// Train the pixel image encoder (against the oracle text encoder or a
    /// jointly learned bag-of-words tower).
    #[command(after_help = "Config file keys: d, steps, batch, lr, tau, emb_dim, stages [{channels, stride}], seed")]
    TrainEncoder(TrainEncoderArgs),
    /// Encode a dataset into a feature store.
    ExtractFeatures(ExtractArgs),
    /// Fit the perturbation inference model on paired feature stores.
    #[command(after_help = "Config file keys: steps, batch, lr, seed, holdout")]
    TrainInference(TrainInferenceArgs),
    /// Train the conditional GAN.
    #[command(after_help = TRAIN_CONFIG_KEYS)]
    Train(TrainArgs),
    /// Generate image grids from caption prompts.
    Generate(GenerateArgs),
    /// Generate from a conditional code mixed between an image and a caption.
    Mix(MixArgs),
    /// Train the attribute classifier used by `eval`.
    #[command(after_help = "Config file keys: steps, batch, lr, stages [{channels, stride}], seed")]
    TrainProbe(TrainProbeArgs),
    /// Compute FID, FID-k, IS or conditional accuracy.
    Eval(EvalArgs),
    /// Monte-Carlo check of the pseudo-feature similarity bound.
    VerifyTheorem(VerifyArgs),
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum EncoderTarget {
    /// Align the image tower to the frozen oracle text encoder.
    Oracle,
    /// Learn a bag-of-words text tower jointly.
    Learned,
}

#[derive(Args, Serialize)]
struct TrainEncoderArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// JSON config file (fields of the encoder training config).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EncoderTarget::Oracle)]
    target: EncoderTarget,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Feature dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Number of trailing samples held out for the alignment report.
    #[arg(long, default_value_t = 500)]
    holdout: usize,
    #[arg(long, default_value_t = DEFAULT_ORACLE_SEED)]
    oracle_seed: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output archive.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EncoderChoice {
    /// Encoder archive from train-encoder; the oracle pair when omitted.
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ORACLE_SEED)]
    oracle_seed: u64,
    /// Oracle feature dimension.
    #[arg(long, default_value_t = DEFAULT_D)]
    d: usize,
}

#[derive(Args, Serialize)]
struct ExtractArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    encoder: EncoderChoice,
    /// Crops averaged per image.
    #[arg(long, default_value_t = 1)]
    aug_k: usize,
    /// Smallest crop side; equal to the image side disables cropping.
    #[arg(long, default_value_t = 32)]
    aug_a: usize,
    /// Also encode captions into this store.
    #[arg(long)]
    text_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image feature store.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainInferenceArgs {
    /// Image feature store.
    #[arg(long)]
    images: PathBuf,
    /// Text feature store with rows matching `--images`.
    #[arg(long)]
    texts: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// JSON config file mirroring the training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Checkpoint to resume or fine-tune from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output directory (checkpoints, metrics.jsonl, manifest).
    #[arg(long)]
    out: PathBuf,
    /// Frozen pixel encoder archive scoring generated images; trained on the
    /// fly against the oracle when omitted.
    #[arg(long)]
    scorer: Option<PathBuf>,
    /// Inference model archive (language_free_trainable mode).
    #[arg(long)]
    inference: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ORACLE_SEED)]
    oracle_seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    pair_fraction: Option<f64>,
    #[arg(long)]
    lr_g: Option<f64>,
    #[arg(long)]
    lr_d: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Weight of the generator image-encoder contrastive term.
    #[arg(long)]
    lam: Option<f64>,
    /// Weight of the discriminator-feature contrastive term.
    #[arg(long)]
    gam: Option<f64>,
    /// Exponential sharpening before the softmax (true/false).
    #[arg(long, conflicts_with = "no_sharpen")]
    sharpen: Option<bool>,
    /// Same as `--sharpen false`.
    #[arg(long)]
    no_sharpen: bool,
    /// Ceiling of the inner exponent under sharpening.
    #[arg(long)]
    sharpen_clamp: Option<f64>,
    /// Fixed perturbation level.
    #[arg(long)]
    xi: Option<f64>,
    /// Crops averaged per image for pseudo text features.
    #[arg(long)]
    pseudo_aug_k: Option<usize>,
    /// Smallest crop side for pseudo text features.
    #[arg(long)]
    pseudo_aug_a: Option<usize>,
    /// Smallest crop side of generated images before the frozen encoder.
    #[arg(long)]
    con_aug_a: Option<usize>,
    /// Decay of the sampling generator's weight average (0 disables).
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Caption prompt; repeatable.
    #[arg(long)]
    prompt: Vec<String>,
    /// File with one prompt per line.
    #[arg(long)]
    prompts_file: Option<PathBuf>,
    /// Samples per prompt.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Text encoder archive with a learned text tower; the oracle when omitted.
    #[arg(long)]
    text_encoder: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ORACLE_SEED)]
    oracle_seed: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum MixModeArg {
    Element,
    Layer,
}

#[derive(Args, Serialize)]
struct MixArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory holding the image condition.
    #[arg(long)]
    data: PathBuf,
    /// Sample index of the image condition.
    #[arg(long)]
    index: usize,
    /// Caption condition.
    #[arg(long)]
    prompt: String,
    /// Probability that a code element comes from the image.
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    #[arg(long, value_enum, default_value_t = MixModeArg::Element)]
    mix_mode: MixModeArg,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[command(flatten)]
    encoder: EncoderChoice,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainProbeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 500)]
    holdout: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Metric {
    Fid,
    FidK,
    Is,
    CondAcc,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Reference images (gen-data layout).
    #[arg(long)]
    real_dir: Option<PathBuf>,
    /// Generated images (generate layout: samples plus manifest.jsonl).
    #[arg(long)]
    fake_dir: PathBuf,
    #[arg(long, value_enum)]
    metric: Metric,
    /// Blur radius for fid-k.
    #[arg(long, default_value_t = 0)]
    k: usize,
    /// Encoder archive whose penultimate layer is the FID feature.
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Probe archive for is and cond-acc.
    #[arg(long)]
    probe: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    splits: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DensityArg {
    /// Pick the convention by a CDF calibration at d in {2, 3, 8}.
    Auto,
    Sphere,
    PaperExact,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    /// Dimension; a comma-separated list sweeps a grid.
    #[arg(long, value_delimiter = ',', required = true)]
    d: Vec<usize>,
    /// Perturbation level; a comma-separated list sweeps a grid.
    #[arg(long, value_delimiter = ',', required = true)]
    xi: Vec<f64>,
    /// Similarity threshold; a comma-separated list sweeps a grid.
    #[arg(long, value_delimiter = ',', required = true)]
    c: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, value_enum, default_value_t = DensityArg::Auto)]
    density: DensityArg,
    /// Shorthand for `--density paper-exact`.
    #[arg(long)]
    paper_exact: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Result JSON.
    #[arg(long, default_value = "theorem_check.json")]
    out: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// What a command produced, echoed into its run manifest.
struct Outcome {
    config: Value,
    seed: u64,
    outputs: Vec<PathBuf>,
    manifest: PathBuf,
    summary: Value,
}

fn version_string() -> String {
    match option_env!("LANGFREE_GIT_DESCRIBE") {
        Some(d) => d.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn write_manifest(command: &str, o: &Outcome, seconds: f64) -> Result<()> {
    let m = json!({
        "command": command,
        "config": o.config,
        "seed": o.seed,
        "version": version_string(),
        "timings": {"wall_seconds": seconds},
        "outputs": o.outputs,
        "summary": o.summary,
    });
    if let Some(parent) = o.manifest.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&o.manifest, serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Recursive JSON merge: objects merge key by key, anything else replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_config(path: Option<&Path>) -> Result<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(Error::Config("config file must hold a JSON object".into()));
    }
    Ok(Some(v))
}

/// Built-in default, overlaid with the config file, overlaid with CLI flags.
fn resolve<T: Serialize + DeserializeOwned>(default: &T, file: Option<Value>, flags: Value) -> Result<T> {
    let mut v = serde_json::to_value(default)?;
    if let Some(f) = file {
        merge(&mut v, f);
    }
    merge(&mut v, flags);
    serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid config: {e}")))
}

/// JSON object of the flags that were given.
fn flags(pairs: &[(&str, Option<Value>)]) -> Value {
    Value::Object(pairs.iter().filter_map(|(k, v)| v.clone().map(|v| (k.to_string(), v))).collect())
}

/// Like [`flags`], but `None` when no flag in the group was given.
fn object(pairs: &[(&str, Option<Value>)]) -> Option<Value> {
    let v = flags(pairs);
    v.as_object().is_some_and(|m| !m.is_empty()).then_some(v)
}

fn opt<T: Serialize>(v: Option<T>) -> Option<Value> {
    v.map(|v| serde_json::to_value(v).expect("serializable flag"))
}

fn load_encoder_pair(choice: &EncoderChoice) -> Result<EncoderPair> {
    match &choice.encoder {
        None => {
            let o = Arc::new(oracle_encoders(choice.d, choice.oracle_seed)?);
            EncoderPair::new(o.clone(), o)
        }
        Some(p) => {
            let (image, text) = encoders_from_archive(&Archive::load(p)?)?;
            let text: Arc<dyn TextEncoder> = match text {
                Some(t) => Arc::new(t),
                None => Arc::new(oracle_encoders(image.d(), choice.oracle_seed)?),
            };
            EncoderPair::new(Arc::new(image), text)
        }
    }
}

fn load_text_encoder(path: Option<&Path>, d: usize, oracle_seed: u64) -> Result<Arc<dyn TextEncoder>> {
    match path {
        None => Ok(Arc::new(oracle_encoders(d, oracle_seed)?)),
        Some(p) => match encoders_from_archive(&Archive::load(p)?)? {
            (_, Some(t)) => Ok(Arc::new(t)),
            (_, None) => Err(Error::Config(format!("{} holds no text encoder", p.display()))),
        },
    }
}

fn caption_slug(caption: &str) -> String {
    caption
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<Outcome> {
    let data = gen_dataset(a.n, a.seed)?;
    data.write_dir(&a.out)?;
    Ok(Outcome {
        config: serde_json::to_value(a)?,
        seed: a.seed,
        outputs: vec![a.out.join("manifest.jsonl")],
        manifest: a.out.join("run_manifest.json"),
        summary: json!({"samples": data.len()}),
    })
}

fn holdout_split(data: ToyDataset, holdout: usize) -> Result<(ToyDataset, ToyDataset)> {
    if holdout == 0 || holdout >= data.len() {
        return Err(Error::Config(format!("holdout must lie in [1, {}), got {holdout}", data.len())));
    }
    Ok(data.split_tail(holdout))
}

fn cmd_train_encoder(a: &TrainEncoderArgs) -> Result<Outcome> {
    let over = flags(&[("steps", opt(a.steps)), ("batch", opt(a.batch)), ("lr", opt(a.lr)), ("d", opt(a.d)), ("seed", opt(Some(a.seed)))]);
    let cfg: EncoderTrainConfig = resolve(&EncoderTrainConfig::default(), read_config(a.config.as_deref())?, over)?;
    let (train_set, eval_set) = holdout_split(ToyDataset::read_dir(&a.data)?, a.holdout)?;
    let target = match a.target {
        EncoderTarget::Oracle => TextTarget::Frozen(Arc::new(oracle_encoders(cfg.d, a.oracle_seed)?)),
        EncoderTarget::Learned => TextTarget::Learned,
    };
    let (image, text, report) = train_encoder_pair(&train_set, &eval_set, target, &cfg)?;
    encoders_to_archive(&image, text.as_ref()).save(&a.out)?;
    Ok(Outcome {
        config: json!({"args": a, "resolved": cfg}),
        seed: cfg.seed,
        outputs: vec![a.out.clone()],
        manifest: sidecar(&a.out),
        summary: json!({"matched_cosine": report.matched_cosine, "retrieval_accuracy": report.retrieval_accuracy,
            "final_loss": report.losses.last()}),
    })
}

fn cmd_extract(a: &ExtractArgs) -> Result<Outcome> {
    let data = ToyDataset::read_dir(&a.data)?;
    let pair = load_encoder_pair(&a.encoder)?;
    let side = data.image(0).side;
    let aug = AugmentSpec { k: a.aug_k, a: a.aug_a, w: side };
    aug.validate()?;
    let images: Vec<&Image> = (0..data.len()).map(|i| data.image(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let feats = extract_image_features(&images, pair.image.as_ref(), Some(&aug), &mut rng)?;
    let mut store = FeatureStore::new(pair.d());
    for (i, f) in feats.iter().enumerate() {
        store.push_feature(f, format!("{i:06}.png"), None)?;
    }
    store.write(&a.out)?;
    let mut outputs = vec![a.out.clone(), FeatureStore::manifest_path(&a.out)];
    if let Some(t) = &a.text_out {
        let mut ts = FeatureStore::new(pair.d());
        for i in 0..data.len() {
            let cap = data.caption(i).to_string();
            ts.push_feature(&pair.text.encode_text(&cap)?, format!("{i:06}.png"), Some(cap))?;
        }
        ts.write(t)?;
        outputs.push(t.clone());
        outputs.push(FeatureStore::manifest_path(t));
    }
    Ok(Outcome {
        config: serde_json::to_value(a)?,
        seed: a.seed,
        outputs,
        manifest: sidecar(&a.out),
        summary: json!({"rows": store.len(), "d": store.d()}),
    })
}

fn cmd_train_inference(a: &TrainInferenceArgs) -> Result<Outcome> {
    let over = flags(&[
        ("steps", opt(a.steps)),
        ("batch", opt(a.batch)),
        ("lr", opt(a.lr)),
        ("holdout", opt(a.holdout)),
        ("seed", opt(Some(a.seed))),
    ]);
    let cfg: InferenceTrainConfig = resolve(&InferenceTrainConfig::default(), read_config(a.config.as_deref())?, over)?;
    let images = FeatureStore::read(&a.images)?;
    let texts = FeatureStore::read(&a.texts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = InferenceModel::new(images.d(), &mut rng);
    let (model, report) = train_inference_model(&images, &texts, model, &cfg)?;
    model.to_archive().save(&a.out)?;
    Ok(Outcome {
        config: json!({"args": a, "resolved": cfg}),
        seed: cfg.seed,
        outputs: vec![a.out.clone()],
        manifest: sidecar(&a.out),
        summary: json!({"heldout_before": report.heldout_before, "heldout_after": report.heldout_after}),
    })
}

fn cmd_train(a: &TrainArgs) -> Result<Outcome> {
    let file = read_config(a.config.as_deref())?;
    let file_mode = match file.as_ref().and_then(|f| f.get("mode")) {
        Some(m) => Some(serde_json::from_value::<Mode>(m.clone()).map_err(|e| Error::Config(format!("mode: {e}")))?),
        None => None,
    };
    let mode = a.mode.or(file_mode).unwrap_or(Mode::LanguageFreeFixed);
    let mut loss = serde_json::Map::new();
    for (k, v) in [
        ("tau", opt(a.tau)),
        ("lam", opt(a.lam)),
        ("gam", opt(a.gam)),
        ("sharpen", opt(if a.no_sharpen { Some(false) } else { a.sharpen })),
        ("sharpen_clamp", opt(a.sharpen_clamp)),
    ] {
        if let Some(v) = v {
            loss.insert(k.into(), v);
        }
    }
    let over = flags(&[
        ("mode", opt(a.mode)),
        ("steps", opt(a.steps)),
        ("batch", opt(a.batch)),
        ("pair_fraction", opt(a.pair_fraction)),
        ("lr_g", opt(a.lr_g)),
        ("lr_d", opt(a.lr_d)),
        ("beta1", opt(a.beta1)),
        ("beta2", opt(a.beta2)),
        ("loss", (!loss.is_empty()).then_some(Value::Object(loss))),
        ("perturb", a.xi.map(|xi| json!({"xi": xi}))),
        ("pseudo_aug", object(&[("k", opt(a.pseudo_aug_k)), ("a", opt(a.pseudo_aug_a))])),
        ("con_aug", object(&[("a", opt(a.con_aug_a))])),
        ("ema_decay", opt(a.ema_decay)),
        ("checkpoint_every", opt(a.checkpoint_every)),
        ("seed", opt(a.seed)),
    ]);
    let cfg: TrainConfig = resolve(&TrainConfig::for_mode(mode), file, over)?;
    cfg.validate()?;
    let data = ToyDataset::read_dir(&a.data)?;
    let oracle = Arc::new(oracle_encoders(cfg.gan.d, a.oracle_seed)?);
    let encoders = EncoderPair::new(oracle.clone(), oracle.clone())?;
    let scorer = match &a.scorer {
        Some(p) => encoders_from_archive(&Archive::load(p)?)?.0,
        None => {
            let n = data.len();
            let hold = (n / 10).clamp(1, 500).min(n.saturating_sub(1)).max(1);
            let (tr, ev) = if n > 1 { data.clone().split_tail(hold) } else { (data.clone(), data.clone()) };
            let ecfg = EncoderTrainConfig { d: cfg.gan.d, seed: cfg.seed, ..EncoderTrainConfig::default() };
            train_encoder_pair(&tr, &ev, TextTarget::Frozen(oracle.clone()), &ecfg)?.0
        }
    };
    let inference = match &a.inference {
        Some(p) => Some(InferenceModel::from_archive(&Archive::load(p)?)?),
        None => None,
    };
    let init = match &a.init {
        Some(p) => Some(Archive::load(p)?),
        None => None,
    };
    let outputs = RunOutputs { dir: Some(a.out.clone()), metrics: Some(a.out.join("metrics.jsonl")) };
    std::fs::create_dir_all(&a.out)?;
    let inputs = TrainInputs { data: &data, encoders, scorer, inference };
    let (_, reports) = train(cfg.clone(), inputs, init.as_ref(), &outputs)?;
    let mut files = vec![a.out.join(FINAL_CHECKPOINT), a.out.join("metrics.jsonl")];
    if cfg.checkpoint_every > 0 {
        let start = init.as_ref().map(|i| langfree::training::checkpoint_step(i)).transpose()?.unwrap_or(0);
        files.extend(
            (start + 1..=start + cfg.steps as u64)
                .filter(|s| s % cfg.checkpoint_every as u64 == 0)
                .map(|s| a.out.join(langfree::training::checkpoint_name(s))),
        );
    }
    Ok(Outcome {
        config: json!({"args": a, "resolved": cfg}),
        seed: cfg.seed,
        outputs: files,
        manifest: a.out.join("run_manifest.json"),
        summary: json!({"steps_run": reports.len(), "last": reports.last()}),
    })
}

fn read_prompts(a: &GenerateArgs) -> Result<Vec<String>> {
    let mut prompts = a.prompt.clone();
    if let Some(p) = &a.prompts_file {
        let text = std::fs::read_to_string(p)?;
        prompts.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
    }
    if prompts.is_empty() {
        return Err(Error::Config("give at least one --prompt or a --prompts-file".into()));
    }
    Ok(prompts)
}

fn write_records(dir: &Path, records: &[ManifestRecord]) -> Result<PathBuf> {
    let path = dir.join("manifest.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(path)
}

fn cmd_generate(a: &GenerateArgs) -> Result<Outcome> {
    if a.n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let prompts = read_prompts(a)?;
    let generator = load_generator(&Archive::load(&a.checkpoint)?)?;
    let text = load_text_encoder(a.text_encoder.as_deref(), generator.config.d, a.oracle_seed)?;
    let samples = a.out.join("samples");
    std::fs::create_dir_all(&samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut outputs = Vec::new();
    let mut records = Vec::new();
    for (pi, prompt) in prompts.iter().enumerate() {
        let h = normalize(&text.encode_text(prompt)?)?;
        let hm = Mat::<f32>::from_rows(&vec![h.values(); a.n]);
        let z = Mat::<f32>::randn(a.n, generator.config.z_dim, &mut rng);
        let images = generator.generate_batch(&z, &hm)?;
        let grid = a.out.join(format!("{pi:03}_{}.png", caption_slug(prompt)));
        save_grid(&images, GRID_COLUMNS, &grid)?;
        outputs.push(grid);
        let attrs = Attributes::parse_caption(prompt).ok();
        for (j, img) in images.iter().enumerate() {
            let file = format!("{pi:03}_{j:03}.png");
            img.save_png(&samples.join(&file))?;
            if let Some(at) = attrs {
                records.push(ManifestRecord {
                    file,
                    shape: at.shape,
                    color: at.color,
                    size: at.size,
                    caption: prompt.clone(),
                    seed: None,
                });
            }
        }
    }
    if !records.is_empty() {
        outputs.push(write_records(&samples, &records)?);
    }
    Ok(Outcome {
        config: serde_json::to_value(a)?,
        seed: a.seed,
        outputs,
        manifest: a.out.join("run_manifest.json"),
        summary: json!({"prompts": prompts.len(), "per_prompt": a.n}),
    })
}

fn cmd_mix(a: &MixArgs) -> Result<Outcome> {
    if a.n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let generator = load_generator(&Archive::load(&a.checkpoint)?)?;
    let data = ToyDataset::read_dir(&a.data)?;
    if a.index >= data.len() {
        return Err(Error::Config(format!("--index {} out of range for {} samples", a.index, data.len())));
    }
    let pair = load_encoder_pair(&a.encoder)?;
    let ha = normalize(&pair.image.encode_image(data.image(a.index))?)?;
    let hb = normalize(&pair.text.encode_text(&a.prompt)?)?;
    let mode = match a.mix_mode {
        MixModeArg::Element => MixMode::Element,
        MixModeArg::Layer => MixMode::Layer,
    };
    let mask = MixMask::sample(&generator.u_layout(), a.p, mode, a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let z = Mat::<f32>::randn(a.n, generator.config.z_dim, &mut rng);
    let rep = |h: &[f64]| Mat::<f32>::from_rows(&vec![h; a.n]);
    let (ma, mb) = (rep(ha.values()), rep(hb.values()));
    let mut images = generator.mix_generate_batch(&z, &ma, &mb, &MixMask::all_a(mask.len()))?;
    images.extend(generator.mix_generate_batch(&z, &ma, &mb, &MixMask::all_b(mask.len()))?);
    images.extend(generator.mix_generate_batch(&z, &ma, &mb, &mask)?);
    std::fs::create_dir_all(&a.out)?;
    let grid = a.out.join(format!(
        "mix_{:06}_{}_{}.png",
        a.index,
        caption_slug(data.caption(a.index)),
        caption_slug(&a.prompt)
    ));
    save_grid(&images, a.n.min(GRID_COLUMNS).max(1), &grid)?;
    Ok(Outcome {
        config: serde_json::to_value(a)?,
        seed: a.seed,
        outputs: vec![grid],
        manifest: a.out.join("run_manifest.json"),
        summary: json!({"rows": ["image", "caption", "mixed"], "from_image": mask.select_a.iter().filter(|&&b| b).count(),
            "code_len": mask.len()}),
    })
}

fn cmd_train_probe(a: &TrainProbeArgs) -> Result<Outcome> {
    let over = flags(&[("steps", opt(a.steps)), ("batch", opt(a.batch)), ("lr", opt(a.lr)), ("seed", opt(Some(a.seed)))]);
    let cfg: ProbeTrainConfig = resolve(&ProbeTrainConfig::default(), read_config(a.config.as_deref())?, over)?;
    let (train_set, eval_set) = holdout_split(ToyDataset::read_dir(&a.data)?, a.holdout)?;
    let (probe, report) = train_probe(&train_set, &eval_set, &cfg)?;
    probe.to_archive().save(&a.out)?;
    Ok(Outcome {
        config: json!({"args": a, "resolved": cfg}),
        seed: cfg.seed,
        outputs: vec![a.out.clone()],
        manifest: sidecar(&a.out),
        summary: json!({"eval_accuracy": report.eval_accuracy}),
    })
}

/// Images of a generate output (its `samples/` subdirectory) or of any
/// directory with a manifest.
fn read_images(dir: &Path) -> Result<ToyDataset> {
    let samples = dir.join("samples");
    if samples.join("manifest.jsonl").exists() {
        ToyDataset::read_dir(&samples)
    } else {
        ToyDataset::read_dir(dir)
    }
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str, metric: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(format!("--metric {metric} needs {flag}")))
}

fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let fake = read_images(&a.fake_dir)?;
    let fake_refs: Vec<&Image> = (0..fake.len()).map(|i| fake.image(i)).collect();
    let mut result = serde_json::Map::new();
    result.insert("metric".into(), serde_json::to_value(a.metric)?);
    result.insert("n_fake".into(), json!(fake.len()));
    match a.metric {
        Metric::Fid | Metric::FidK => {
            let name = if a.metric == Metric::Fid { "fid" } else { "fid-k" };
            let real = read_images(need(&a.real_dir, "--real-dir", name)?)?;
            let (enc, _) = encoders_from_archive(&Archive::load(need(&a.extractor, "--extractor", name)?)?)?;
            let real_refs: Vec<&Image> = (0..real.len()).map(|i| real.image(i)).collect();
            let k = if a.metric == Metric::Fid { 0 } else { a.k };
            let v = if k == 0 { fid_images(&real_refs, &fake_refs, &enc)? } else { fid_k(&real_refs, &fake_refs, k, &enc)? };
            result.insert("value".into(), json!(v));
            result.insert("k".into(), json!(k));
            result.insert("blur_sigma".into(), json!(k as f64 * BLUR_SIGMA_PER_RADIUS));
            result.insert("n_real".into(), json!(real.len()));
            result.insert("extractor_dim".into(), json!(enc.penultimate_dim()));
        }
        Metric::Is => {
            let probe = AttributeProbe::from_archive(&Archive::load(need(&a.probe, "--probe", "is")?)?)?;
            let (mean, std) = inception_score(&probe.joint_probs(&fake_refs)?, a.splits)?;
            result.insert("value".into(), json!(mean));
            result.insert("std".into(), json!(std));
            result.insert("splits".into(), json!(a.splits));
        }
        Metric::CondAcc => {
            let probe = AttributeProbe::from_archive(&Archive::load(need(&a.probe, "--probe", "cond-acc")?)?)?;
            let pred = probe.predict(&fake_refs)?;
            let n = fake.len() as f64;
            let mut hits = [0usize; 4];
            for (i, p) in pred.iter().enumerate() {
                let t = fake.attributes(i);
                hits[0] += (*p == t) as usize;
                hits[1] += (p.shape == t.shape) as usize;
                hits[2] += (p.color == t.color) as usize;
                hits[3] += (p.size == t.size) as usize;
            }
            let [strict, shape, color, size] = hits.map(|h| h as f64 / n);
            result.insert("value".into(), json!(strict));
            result.insert("shape".into(), json!(shape));
            result.insert("color".into(), json!(color));
            result.insert("size".into(), json!(size));
            result.insert("mean_attribute".into(), json!((shape + color + size) / 3.0));
        }
    }
    let result = Value::Object(result);
    if let Some(parent) = a.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&a.out, serde_json::to_vec_pretty(&result)?)?;
    println!("{}", serde_json::to_string(&result)?);
    Ok(Outcome {
        config: serde_json::to_value(a)?,
        seed: 0,
        outputs: vec![a.out.clone()],
        manifest: sidecar(&a.out),
        summary: result,
    })
}

fn cmd_verify(a: &VerifyArgs) -> Result<Outcome> {
    let mut queries = Vec::new();
    for &d in &a.d {
        for &xi in &a.xi {
            for &c in &a.c {
                let q = BoundQuery { c, xi, d };
                q.validate()?;
                queries.push(q);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let density = if a.paper_exact { DensityArg::PaperExact } else { a.density };
    let (conv, calibration) = match density {
        DensityArg::Sphere => (DensityConvention::Sphere, None),
        DensityArg::PaperExact => (DensityConvention::PaperExact, None),
        DensityArg::Auto => {
            let cal = calibrate_density(&[2, 3, 8], 20_000, &mut rng)?;
            (cal.selected, Some(cal))
        }
    };
    let mut cells = Vec::with_capacity(queries.len());
    for q in &queries {
        let check = theorem1_mc_check(q, a.trials, &mut rng, conv)?;
        println!("d={} xi={} c={}", q.d, q.xi, q.c);
        println!("bound {:.6}", check.bound);
        println!("empirical {:.6} (se {:.2e}, {} trials)", check.empirical_prob, check.std_err, check.trials);
        cells.push((q, check));
    }
    let passed = cells.iter().all(|(_, c)| c.passed);
    println!("{}", if passed { "PASS" } else { "FAIL" });
    let cells: Vec<Value> =
        cells.iter().map(|(q, c)| json!({"query": {"d": q.d, "xi": q.xi, "c": q.c}, "check": c})).collect();
    let result = json!({"density": conv, "calibration": calibration, "cells": cells, "passed": passed});
    std::fs::write(&a.out, serde_json::to_vec_pretty(&result)?)?;
    Ok(Outcome {
        config: serde_json::to_value(a)?,
        seed: a.seed,
        outputs: vec![a.out.clone()],
        manifest: sidecar(&a.out),
        summary: result,
    })
}

fn run(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let (name, outcome) = match &cli.command {
        Command::GenData(a) => ("gen-data", cmd_gen_data(a)?),
        Command::TrainEncoder(a) => ("train-encoder", cmd_train_encoder(a)?),
        Command::ExtractFeatures(a) => ("extract-features", cmd_extract(a)?),
        Command::TrainInference(a) => ("train-inference", cmd_train_inference(a)?),
        Command::Train(a) => ("train", cmd_train(a)?),
        Command::Generate(a) => ("generate", cmd_generate(a)?),
        Command::Mix(a) => ("mix", cmd_mix(a)?),
        Command::TrainProbe(a) => ("train-probe", cmd_train_probe(a)?),
        Command::Eval(a) => ("eval", cmd_eval(a)?),
        Command::VerifyTheorem(a) => ("verify-theorem", cmd_verify(a)?),
    };
    write_manifest(name, &outcome, start.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
