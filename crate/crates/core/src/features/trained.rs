//! Learned encoder pair for the toy domain: a small CNN image tower and a
//! bag-of-words text tower, trained with a symmetric contrastive objective.
//! The image tower can also be trained against a frozen text encoder (e.g.
//! the oracle) so that generated pixels can be scored in that space.

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::features::{FeatureVector, ImageEncoder, TextEncoder};
use crate::losses::{normalize_rows, normalize_rows_backward};
use crate::nn::{prefixed, prefixed_mut, Adam, AdamConfig, ConvTrunk, Linear, Maps, Mat, Module, Param, Real, Stage, TrunkCache};
use crate::raster::{batch_to_maps, Image, CHANNELS};
use crate::toyset::ToyDataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

/// CNN image encoder: strided conv trunk, global pooling (the penultimate
/// representation) and a linear projection into the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelEncoder<R> {
    pub trunk: ConvTrunk<R>,
    pub proj: Linear<R>,
}

#[derive(Clone, Debug)]
pub struct PixelEncoderCache<R> {
    trunk: TrunkCache<R>,
    pooled: Mat<R>,
}

pub fn default_encoder_stages() -> Vec<Stage> {
    vec![
        Stage { channels: 16, stride: 2 },
        Stage { channels: 32, stride: 2 },
        Stage { channels: 64, stride: 2 },
    ]
}

impl<R: Real> PixelEncoder<R> {
    pub fn new(stages: &[Stage], d: usize, rng: &mut impl Rng) -> Self {
        let trunk = ConvTrunk::new(CHANNELS, stages, rng);
        let proj = Linear::new(trunk.out_channels(), d, 1.0, rng);
        Self { trunk, proj }
    }

    pub fn d(&self) -> usize {
        self.proj.fan_out()
    }

    pub fn penultimate_dim(&self) -> usize {
        self.trunk.out_channels()
    }

    pub fn forward(&self, x: &Maps<R>) -> (Mat<R>, PixelEncoderCache<R>) {
        let (pooled, trunk) = self.trunk.forward(x);
        let feats = self.proj.forward(&pooled);
        (feats, PixelEncoderCache { trunk, pooled })
    }

    /// Pooled trunk activations (evaluation features).
    pub fn penultimate(&self, x: &Maps<R>) -> Mat<R> {
        self.trunk.forward(x).0
    }

    pub fn backward(&mut self, cache: &PixelEncoderCache<R>, dfeat: &Mat<R>, grads: bool, need_dx: bool) -> Option<Maps<R>> {
        let dpooled = self.proj.backward(&cache.pooled, dfeat, grads);
        self.trunk.backward(&cache.trunk, &dpooled, grads, need_dx)
    }
}

impl<R: Real> Module<R> for PixelEncoder<R> {
    fn params(&self) -> Vec<(String, &Param<R>)> {
        prefixed("trunk", self.trunk.params()).chain(prefixed("proj", self.proj.params())).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        prefixed_mut("trunk", self.trunk.params_mut())
            .chain(prefixed_mut("proj", self.proj.params_mut()))
            .collect()
    }
}

const ENCODE_CHUNK: usize = 256;

impl PixelEncoder<f32> {
    /// Penultimate features for a set of images, in chunks.
    pub fn penultimate_features(&self, images: &[&Image]) -> Result<Mat<f64>> {
        let mut out = Mat::zeros(0, self.penultimate_dim());
        for chunk in images.chunks(ENCODE_CHUNK) {
            let pooled = self.penultimate(&batch_to_maps::<f32>(chunk)?);
            out.data.extend(pooled.data.iter().map(|&v| v as f64));
            out.rows += pooled.rows;
        }
        Ok(out)
    }
}

/// Serialized encoder pair: the image tower and, when it was learned
/// jointly, the bag-of-words text tower.
pub fn encoders_to_archive(image: &PixelEncoder<f32>, text: Option<&BowTextEncoder>) -> Archive {
    let stages: Vec<Stage> = image.trunk.convs.iter().map(|c| Stage { channels: c.c_out(), stride: c.stride }).collect();
    let mut meta = serde_json::json!({"kind": "pixel_encoder", "stages": stages, "d": image.d()});
    if let Some(t) = text {
        meta["text"] = serde_json::json!({"vocab": t.vocab, "emb_dim": t.emb_dim()});
    }
    let mut a = Archive::new(meta);
    a.put_module("image", image);
    if let Some(t) = text {
        a.put_module("text", t);
    }
    a
}

pub fn encoders_from_archive(a: &Archive) -> Result<(PixelEncoder<f32>, Option<BowTextEncoder>)> {
    #[derive(Deserialize)]
    struct TextMeta {
        vocab: Vec<String>,
        emb_dim: usize,
    }
    #[derive(Deserialize)]
    struct Meta {
        kind: String,
        stages: Vec<Stage>,
        d: usize,
        text: Option<TextMeta>,
    }
    let meta: Meta = serde_json::from_value(a.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("not an encoder archive: {e}")))?;
    if meta.kind != "pixel_encoder" {
        return Err(Error::Checkpoint(format!("expected a pixel_encoder archive, found {:?}", meta.kind)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut image = PixelEncoder::new(&meta.stages, meta.d, &mut rng);
    a.load_module("image", &mut image)?;
    let text = match meta.text {
        Some(t) => {
            let mut enc = BowTextEncoder::new(t.vocab, t.emb_dim, meta.d, &mut rng);
            a.load_module("text", &mut enc)?;
            Some(enc)
        }
        None => None,
    };
    Ok((image, text))
}

impl ImageEncoder for PixelEncoder<f32> {
    fn dim(&self) -> usize {
        self.d()
    }

    fn encode_image(&self, image: &Image) -> Result<FeatureVector> {
        Ok(self.encode_batch(std::slice::from_ref(image))?.remove(0))
    }

    fn encode_batch(&self, images: &[Image]) -> Result<Vec<FeatureVector>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(ENCODE_CHUNK) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let (feats, _) = self.forward(&batch_to_maps::<f32>(&refs)?);
            for i in 0..feats.rows {
                out.push(FeatureVector::new(feats.row(i).iter().map(|&v| v as f64).collect())?);
            }
        }
        Ok(out)
    }
}

/// Bag-of-words text encoder: mean token embedding, then a linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct BowTextEncoder {
    pub vocab: Vec<String>,
    pub embedding: Param<f32>,
    pub proj: Linear<f32>,
}

impl BowTextEncoder {
    pub fn new(vocab: Vec<String>, emb_dim: usize, d: usize, rng: &mut impl Rng) -> Self {
        let embedding = Param::normal(vec![vocab.len(), emb_dim], 1.0, rng);
        let proj = Linear::new(emb_dim, d, 1.0, rng);
        Self { vocab, embedding, proj }
    }

    /// Vocabulary of the toy caption template.
    pub fn toy_vocab() -> Vec<String> {
        use crate::toyset::{Color, Shape, Size};
        let mut v = vec!["a".to_string()];
        v.extend(Size::ALL.iter().map(|s| s.name().to_string()));
        v.extend(Color::ALL.iter().map(|c| c.name().to_string()));
        v.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
        v
    }

    fn emb_dim(&self) -> usize {
        self.embedding.shape[1]
    }

    fn tokenize(&self, caption: &str) -> Result<Vec<usize>> {
        let toks: Result<Vec<usize>> = caption
            .split_whitespace()
            .map(|w| {
                self.vocab
                    .iter()
                    .position(|v| v == w)
                    .ok_or_else(|| Error::Data(format!("unknown token {w:?}")))
            })
            .collect();
        let toks = toks?;
        if toks.is_empty() {
            return Err(Error::Data("empty caption".into()));
        }
        Ok(toks)
    }

    fn bags(&self, captions: &[&str]) -> Result<(Mat<f32>, Vec<Vec<usize>>)> {
        let e = self.emb_dim();
        let mut m = Mat::zeros(captions.len(), e);
        let mut toks = Vec::with_capacity(captions.len());
        for (i, c) in captions.iter().enumerate() {
            let t = self.tokenize(c)?;
            let inv = 1.0 / t.len() as f32;
            let row = m.row_mut(i);
            for &ti in &t {
                for (r, &v) in row.iter_mut().zip(&self.embedding.value[ti * e..(ti + 1) * e]) {
                    *r += v * inv;
                }
            }
            toks.push(t);
        }
        Ok((m, toks))
    }

    fn backward(&mut self, bags: &Mat<f32>, toks: &[Vec<usize>], dout: &Mat<f32>) {
        let dbag = self.proj.backward(bags, dout, true);
        let e = self.emb_dim();
        for (i, t) in toks.iter().enumerate() {
            let inv = 1.0 / t.len() as f32;
            for &ti in t {
                for (g, &d) in self.embedding.grad[ti * e..(ti + 1) * e].iter_mut().zip(dbag.row(i)) {
                    *g += d * inv;
                }
            }
        }
    }
}

impl Module<f32> for BowTextEncoder {
    fn params(&self) -> Vec<(String, &Param<f32>)> {
        std::iter::once(("embedding".to_string(), &self.embedding))
            .chain(prefixed("proj", self.proj.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<f32>)> {
        std::iter::once(("embedding".to_string(), &mut self.embedding))
            .chain(prefixed_mut("proj", self.proj.params_mut()))
            .collect()
    }
}

impl TextEncoder for BowTextEncoder {
    fn dim(&self) -> usize {
        self.proj.fan_out()
    }

    fn encode_text(&self, caption: &str) -> Result<FeatureVector> {
        let (bag, _) = self.bags(&[caption])?;
        let out = self.proj.forward(&bag);
        FeatureVector::new(out.row(0).iter().map(|&v| v as f64).collect())
    }
}

/// What the image tower is aligned against.
#[derive(Clone)]
pub enum TextTarget {
    /// Train a bag-of-words text tower jointly.
    Learned,
    /// Keep this text encoder fixed and align the image tower to it.
    Frozen(Arc<dyn TextEncoder>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub d: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub tau: f64,
    pub emb_dim: usize,
    pub stages: Vec<Stage>,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            d: 64,
            steps: 600,
            batch: 128,
            lr: 2e-3,
            tau: 0.1,
            emb_dim: 32,
            stages: default_encoder_stages(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainReport {
    pub losses: Vec<f64>,
    /// Mean cosine similarity of matched (image, caption) pairs on the
    /// evaluation set.
    pub matched_cosine: f64,
    /// Fraction of evaluation images whose nearest caption embedding (over
    /// all distinct captions present) is their own.
    pub retrieval_accuracy: f64,
}

/// Symmetric InfoNCE on row-normalized features. Off-diagonal pairs that
/// share a label are excluded from the denominators (they are not
/// negatives).
fn masked_clip_loss(fh: &Mat<f64>, th: &Mat<f64>, labels: &[usize], tau: f64) -> (f64, Mat<f64>, Mat<f64>) {
    let n = fh.rows;
    let mut logits = Mat::zeros(n, n);
    crate::nn::gemm(n, fh.cols, n, 1.0 / tau, &fh.data, false, &th.data, true, 0.0, &mut logits.data);
    let valid = |i: usize, j: usize| i == j || labels[i] != labels[j];
    let mut dl = Mat::zeros(n, n);
    let mut value = 0.0;
    let scale = 1.0 / (2.0 * n as f64);
    // rows: image i against captions j
    for i in 0..n {
        let m = (0..n).filter(|&j| valid(i, j)).map(|j| logits.data[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).filter(|&j| valid(i, j)).map(|j| (logits.data[i * n + j] - m).exp()).sum();
        let lse = m + z.ln();
        value += (lse - logits.data[i * n + i]) * scale;
        for j in (0..n).filter(|&j| valid(i, j)) {
            let p = (logits.data[i * n + j] - lse).exp();
            dl.data[i * n + j] += (p - if i == j { 1.0 } else { 0.0 }) * scale;
        }
    }
    // columns: caption j against images i
    for j in 0..n {
        let m = (0..n).filter(|&i| valid(i, j)).map(|i| logits.data[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).filter(|&i| valid(i, j)).map(|i| (logits.data[i * n + j] - m).exp()).sum();
        let lse = m + z.ln();
        value += (lse - logits.data[j * n + j]) * scale;
        for i in (0..n).filter(|&i| valid(i, j)) {
            let p = (logits.data[i * n + j] - lse).exp();
            dl.data[i * n + j] += (p - if i == j { 1.0 } else { 0.0 }) * scale;
        }
    }
    let mut dfh = Mat::zeros(n, fh.cols);
    crate::nn::gemm(n, n, fh.cols, 1.0 / tau, &dl.data, false, &th.data, false, 0.0, &mut dfh.data);
    let mut dth = Mat::zeros(n, fh.cols);
    crate::nn::gemm(n, n, fh.cols, 1.0 / tau, &dl.data, true, &fh.data, false, 0.0, &mut dth.data);
    (value, dfh, dth)
}

fn to_f64(m: &Mat<f32>) -> Mat<f64> {
    m.cast()
}

/// Train an image tower (and optionally a text tower) on the toy set.
/// Returns the image encoder, the text tower when learned, and a report
/// measured on `eval`.
pub fn train_encoder_pair(
    train: &ToyDataset,
    eval: &ToyDataset,
    target: TextTarget,
    cfg: &EncoderTrainConfig,
) -> Result<(PixelEncoder<f32>, Option<BowTextEncoder>, EncoderTrainReport)> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Data("encoder training needs non-empty train and eval sets".into()));
    }
    if cfg.batch < 2 {
        return Err(Error::Config("encoder batch must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut image_enc = PixelEncoder::<f32>::new(&cfg.stages, cfg.d, &mut rng);
    let mut text_enc = match &target {
        TextTarget::Learned => Some(BowTextEncoder::new(BowTextEncoder::toy_vocab(), cfg.emb_dim, cfg.d, &mut rng)),
        TextTarget::Frozen(t) => {
            crate::error::ensure_dim(cfg.d, t.dim())?;
            None
        }
    };
    // Frozen targets only depend on the caption; embed each distinct one once.
    let mut frozen_cache: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let adam = AdamConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.99, eps: 1e-8 };
    let mut opt_img = Adam::new(adam);
    let mut opt_txt = Adam::new(adam);
    let mut losses = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..train.len())).collect();
        let images: Vec<&Image> = idx.iter().map(|&i| train.image(i)).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train.attributes(i).index()).collect();
        // Captions of the training pairs.
        let captions: Vec<String> = idx.iter().map(|&i| train.caption(i).to_string()).collect();

        image_enc.zero_grad();
        let (feats, cache) = image_enc.forward(&batch_to_maps::<f32>(&images)?);
        let (fh, fnorm) = normalize_rows(&to_f64(&feats))?;

        let (loss, dfh) = match (&target, text_enc.as_mut()) {
            (TextTarget::Learned, Some(txt)) => {
                txt.zero_grad();
                let refs: Vec<&str> = captions.iter().map(String::as_str).collect();
                let (bags, toks) = txt.bags(&refs)?;
                let tfeat = txt.proj.forward(&bags);
                let (th, tnorm) = normalize_rows(&to_f64(&tfeat))?;
                let (loss, dfh, dth) = masked_clip_loss(&fh, &th, &labels, cfg.tau);
                let dt: Mat<f32> = normalize_rows_backward(&th, &tnorm, &dth).cast();
                txt.backward(&bags, &toks, &dt);
                opt_txt.step(txt);
                (loss, dfh)
            }
            (TextTarget::Frozen(t), _) => {
                let mut rows = Vec::with_capacity(captions.len());
                for c in &captions {
                    if !frozen_cache.contains_key(c) {
                        frozen_cache.insert(c.clone(), t.encode_text(c)?.values);
                    }
                    rows.push(frozen_cache[c].clone());
                }
                let (th, _) = normalize_rows(&Mat::from_rows(&rows))?;
                let (loss, dfh, _) = masked_clip_loss(&fh, &th, &labels, cfg.tau);
                (loss, dfh)
            }
            (TextTarget::Learned, None) => unreachable!("learned target always owns a text tower"),
        };
        let dfeat: Mat<f32> = normalize_rows_backward(&fh, &fnorm, &dfh).cast();
        image_enc.backward(&cache, &dfeat, true, false);
        opt_img.step(&mut image_enc);
        if !loss.is_finite() {
            return Err(Error::Numerical("encoder training diverged".into()));
        }
        losses.push(loss);
    }

    let text_ref: Arc<dyn TextEncoder> = match (&target, &text_enc) {
        (TextTarget::Frozen(t), _) => t.clone(),
        (TextTarget::Learned, Some(t)) => Arc::new(t.clone()),
        (TextTarget::Learned, None) => unreachable!("learned target always owns a text tower"),
    };
    let (matched_cosine, retrieval_accuracy) = alignment_report(&image_enc, text_ref.as_ref(), eval)?;
    Ok((image_enc, text_enc, EncoderTrainReport { losses, matched_cosine, retrieval_accuracy }))
}

fn alignment_report(image_enc: &PixelEncoder<f32>, text: &dyn TextEncoder, eval: &ToyDataset) -> Result<(f64, f64)> {
    let images: Vec<Image> = (0..eval.len()).map(|i| eval.image(i).clone()).collect();
    let feats = image_enc.encode_batch(&images)?;
    let mut candidates: BTreeMap<usize, FeatureVector> = BTreeMap::new();
    for i in 0..eval.len() {
        let a = eval.attributes(i);
        if let std::collections::btree_map::Entry::Vacant(e) = candidates.entry(a.index()) {
            e.insert(text.encode_text(&a.caption())?);
        }
    }
    let mut cos_sum = 0.0;
    let mut hits = 0usize;
    for (i, f) in feats.iter().enumerate() {
        let own = eval.attributes(i).index();
        cos_sum += crate::features::cosine_sim(f, &candidates[&own])?;
        let best = candidates
            .iter()
            .map(|(k, t)| (k, crate::features::cosine_sim(f, t).unwrap_or(-1.0)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| *k);
        if best == Some(own) {
            hits += 1;
        }
    }
    let n = eval.len() as f64;
    Ok((cos_sum / n, hits as f64 / n))
}
