use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::features::{normalize, TextEncoder};
use crate::gan::GeneratorNet;
use crate::nn::{prefixed, prefixed_mut, Adam, AdamConfig, ConvTrunk, Linear, Mat, Module, Param, Stage};
use crate::raster::{batch_to_maps, Image, CHANNELS};
use crate::toyset::{Attributes, Color, Shape, Size, ToyDataset, NUM_COMBOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const GROUPS: [usize; 3] = [Shape::ALL.len(), Color::ALL.len(), Size::ALL.len()];

/// Attribute classifier: conv trunk with one softmax group per attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeProbe {
    pub trunk: ConvTrunk<f32>,
    pub head: Linear<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub stages: Vec<Stage>,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2500,
            batch: 128,
            lr: 2e-3,
            stages: vec![
                Stage { channels: 16, stride: 2 },
                Stage { channels: 32, stride: 2 },
                Stage { channels: 64, stride: 2 },
            ],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrainReport {
    pub losses: Vec<f64>,
    /// Fraction of evaluation images with all three attributes right.
    pub eval_accuracy: f64,
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(x: &[f64]) -> usize {
    x.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0
}

impl AttributeProbe {
    pub fn new(stages: &[Stage], rng: &mut impl Rng) -> Self {
        let trunk = ConvTrunk::new(CHANNELS, stages, rng);
        let head = Linear::new(trunk.out_channels(), GROUPS.iter().sum(), 1.0, rng);
        Self { trunk, head }
    }

    fn logits(&self, images: &[&Image]) -> Result<Mat<f32>> {
        let (pooled, _) = self.trunk.forward(&batch_to_maps::<f32>(images)?);
        Ok(self.head.forward(&pooled))
    }

    /// Per-group softmax probabilities for each image.
    pub fn group_probs(&self, images: &[&Image]) -> Result<Vec<[Vec<f64>; 3]>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let l = self.logits(chunk)?;
            for i in 0..l.rows {
                let r = l.row_f64(i);
                let (a, rest) = r.split_at(GROUPS[0]);
                let (b, c) = rest.split_at(GROUPS[1]);
                out.push([softmax(a), softmax(b), softmax(c)]);
            }
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<Attributes>> {
        Ok(self
            .group_probs(images)?
            .into_iter()
            .map(|[s, c, z]| Attributes { shape: Shape::ALL[argmax(&s)], color: Color::ALL[argmax(&c)], size: Size::ALL[argmax(&z)] })
            .collect())
    }

    /// Posterior over all attribute tuples (product of group posteriors),
    /// columns ordered by [`Attributes::index`].
    pub fn joint_probs(&self, images: &[&Image]) -> Result<Mat<f64>> {
        let groups = self.group_probs(images)?;
        let mut m = Mat::zeros(groups.len(), NUM_COMBOS);
        for (i, [s, c, z]) in groups.iter().enumerate() {
            for a in Attributes::all() {
                m.data[i * NUM_COMBOS + a.index()] = s[a.shape as usize] * c[a.color as usize] * z[a.size as usize];
            }
        }
        Ok(m)
    }

    pub fn to_archive(&self) -> Archive {
        let stages: Vec<Stage> = self
            .trunk
            .convs
            .iter()
            .map(|c| Stage { channels: c.c_out(), stride: c.stride })
            .collect();
        let mut a = Archive::new(serde_json::json!({"kind": "attribute_probe", "stages": stages}));
        a.put_module("probe", self);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let stages: Vec<Stage> = a
            .meta
            .get("stages")
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| Error::Checkpoint("archive is not an attribute probe".into()))?;
        let mut p = Self::new(&stages, &mut ChaCha8Rng::seed_from_u64(0));
        a.load_module("probe", &mut p)?;
        Ok(p)
    }
}

impl Module<f32> for AttributeProbe {
    fn params(&self) -> Vec<(String, &Param<f32>)> {
        prefixed("trunk", self.trunk.params()).chain(prefixed("head", self.head.params())).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<f32>)> {
        prefixed_mut("trunk", self.trunk.params_mut()).chain(prefixed_mut("head", self.head.params_mut())).collect()
    }
}

/// Train the probe on ground-truth attribute labels with summed per-group
/// cross-entropy.
pub fn train_probe(train: &ToyDataset, eval: &ToyDataset, cfg: &ProbeTrainConfig) -> Result<(AttributeProbe, ProbeTrainReport)> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Data("probe training needs non-empty train and eval sets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = AttributeProbe::new(&cfg.stages, &mut rng);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.99, eps: 1e-8 });
    let mut losses = Vec::with_capacity(cfg.steps);
    let width: usize = GROUPS.iter().sum();
    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..train.len())).collect();
        let images: Vec<&Image> = idx.iter().map(|&i| train.image(i)).collect();
        probe.zero_grad();
        let (pooled, cache) = probe.trunk.forward(&batch_to_maps::<f32>(&images)?);
        let logits = probe.head.forward(&pooled);
        let mut dl = Mat::<f32>::zeros(logits.rows, width);
        let mut loss = 0.0;
        let n = idx.len() as f64;
        for (r, &i) in idx.iter().enumerate() {
            let a = train.attributes(i);
            let targets = [a.shape as usize, a.color as usize, a.size as usize];
            let row = logits.row_f64(r);
            let mut off = 0;
            for (g, &t) in GROUPS.iter().zip(&targets) {
                let p = softmax(&row[off..off + g]);
                loss -= p[t].max(1e-300).ln() / n;
                for (j, pj) in p.iter().enumerate() {
                    let y = if j == t { 1.0 } else { 0.0 };
                    dl.data[r * width + off + j] = ((pj - y) / n) as f32;
                }
                off += g;
            }
        }
        let dpooled = probe.head.backward(&pooled, &dl, true);
        probe.trunk.backward(&cache, &dpooled, true, false);
        opt.step(&mut probe);
        if !loss.is_finite() {
            return Err(Error::Numerical("probe training diverged".into()));
        }
        losses.push(loss);
    }
    let images: Vec<&Image> = (0..eval.len()).map(|i| eval.image(i)).collect();
    let pred = probe.predict(&images)?;
    let hits = pred.iter().enumerate().filter(|(i, p)| **p == eval.attributes(*i)).count();
    let eval_accuracy = hits as f64 / eval.len() as f64;
    Ok((probe, ProbeTrainReport { losses, eval_accuracy }))
}

/// Anything that turns latents and unit conditions into images.
pub trait ConditionalGenerator {
    fn z_dim(&self) -> usize;
    fn generate_batch(&self, z: &Mat<f32>, h: &Mat<f32>) -> Result<Vec<Image>>;
}

impl ConditionalGenerator for GeneratorNet<f32> {
    fn z_dim(&self) -> usize {
        self.config.z_dim
    }

    fn generate_batch(&self, z: &Mat<f32>, h: &Mat<f32>) -> Result<Vec<Image>> {
        GeneratorNet::generate_batch(self, z, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondAccReport {
    pub n: usize,
    /// Fraction of samples with shape, color and size all matching.
    pub strict: f64,
    pub shape: f64,
    pub color: f64,
    pub size: f64,
    /// Mean of the three per-attribute accuracies.
    pub mean_attribute: f64,
}

/// Generate one image per caption prompt (condition `normalize(text(p))`,
/// latent drawn from `seed`) and compare probe predictions to the prompt's
/// attributes.
pub fn conditional_accuracy(
    generator: &dyn ConditionalGenerator,
    text: &dyn TextEncoder,
    probe: &AttributeProbe,
    prompts: &[String],
    seed: u64,
) -> Result<CondAccReport> {
    if prompts.is_empty() {
        return Err(Error::Data("no prompts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<Attributes> = prompts.iter().map(|p| Attributes::parse_caption(p)).collect::<Result<_>>()?;
    let mut counts = [0usize; 4];
    for (chunk, attrs) in prompts.chunks(64).zip(truth.chunks(64)) {
        let rows: Vec<Vec<f64>> = chunk
            .iter()
            .map(|p| Ok(normalize(&text.encode_text(p)?)?.values().to_vec()))
            .collect::<Result<_>>()?;
        let h = Mat::<f32>::from_rows(&rows);
        let z = Mat::<f32>::randn(chunk.len(), generator.z_dim(), &mut rng);
        let images = generator.generate_batch(&z, &h)?;
        let refs: Vec<&Image> = images.iter().collect();
        for (p, t) in probe.predict(&refs)?.iter().zip(attrs) {
            counts[0] += (p == t) as usize;
            counts[1] += (p.shape == t.shape) as usize;
            counts[2] += (p.color == t.color) as usize;
            counts[3] += (p.size == t.size) as usize;
        }
    }
    let n = prompts.len() as f64;
    let [strict, shape, color, size] = counts.map(|c| c as f64 / n);
    Ok(CondAccReport { n: prompts.len(), strict, shape, color, size, mean_attribute: (shape + color + size) / 3.0 })
}
