use crate::archive::Archive;
use crate::error::{ensure_dim, Error, Result};
use crate::features::FeatureStore;
use crate::losses::{normalize_rows, normalize_rows_backward};
use crate::nn::{prefixed, prefixed_mut, Act, Adam, AdamConfig, Mat, Mlp, MlpCache, Module, Param, Real};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Clamp range of the predicted log standard deviation.
pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Learned perturbation: `h = f + r1(f) + eps * exp(clamp(r2(f)))`.
///
/// Both networks are 4 fully-connected layers of width `d` with leaky ReLU
/// between them and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceModel<R> {
    pub r1: Mlp<R>,
    pub r2: Mlp<R>,
}

pub struct InferenceCache<R> {
    c1: MlpCache<R>,
    c2: MlpCache<R>,
    eps: Mat<R>,
    std: Mat<R>,
    in_range: Vec<bool>,
    hhat: Mat<f64>,
    norms: Vec<f64>,
}

impl<R: Real> InferenceModel<R> {
    /// Output layers start small so the untrained model adds a modest
    /// offset and noise of norm about one.
    pub fn new(d: usize, rng: &mut impl Rng) -> Self {
        let widths = [d; 5];
        let mut r1 = Mlp::new(&widths, Act::Leaky, Act::Identity, rng);
        let mut r2 = Mlp::new(&widths, Act::Leaky, Act::Identity, rng);
        let shrink = R::lit(0.1);
        for m in [&mut r1, &mut r2] {
            let last = m.layers.last_mut().expect("4 layers");
            last.weight.value.iter_mut().for_each(|w| *w *= shrink);
        }
        let b0 = R::lit(-0.5 * (d as f64).ln());
        r2.layers.last_mut().expect("4 layers").bias.value.iter_mut().for_each(|b| *b = b0);
        Self { r1, r2 }
    }

    pub fn d(&self) -> usize {
        self.r1.layers[0].fan_in()
    }

    /// Unit pseudo features for a batch of image features and noise rows.
    pub fn forward(&self, f: &Mat<R>, eps: &Mat<R>) -> Result<(Mat<f64>, InferenceCache<R>)> {
        ensure_dim(self.d(), f.cols)?;
        ensure_dim(f.cols, eps.cols)?;
        ensure_dim(f.rows, eps.rows)?;
        let c1 = self.r1.forward(f);
        let c2 = self.r2.forward(f);
        let (lo, hi) = (R::lit(LOG_STD_MIN), R::lit(LOG_STD_MAX));
        let raw = c2.output();
        let in_range: Vec<bool> = raw.data.iter().map(|&v| v > lo && v < hi).collect();
        let mut std = raw.clone();
        std.data.iter_mut().for_each(|v| *v = v.max(lo).min(hi).exp());
        let mut h = Mat::<f64>::zeros(f.rows, f.cols);
        for k in 0..h.data.len() {
            h.data[k] = (f.data[k] + c1.output().data[k] + eps.data[k] * std.data[k]).as_f64();
        }
        if !h.is_finite() {
            return Err(Error::Numerical("inference model produced a non-finite feature".into()));
        }
        let (hhat, norms) = normalize_rows(&h)?;
        Ok((hhat.clone(), InferenceCache { c1, c2, eps: eps.clone(), std, in_range, hhat, norms }))
    }

    /// Backpropagate `d loss / d hhat` into parameter gradients.
    pub fn backward(&mut self, cache: &InferenceCache<R>, dhhat: &Mat<f64>) {
        let dh = normalize_rows_backward(&cache.hhat, &cache.norms, dhhat);
        let d1: Mat<R> = dh.cast();
        let mut d2 = d1.clone();
        for k in 0..d2.data.len() {
            d2.data[k] = if cache.in_range[k] { d2.data[k] * cache.eps.data[k] * cache.std.data[k] } else { R::zero() };
        }
        self.r1.backward(&cache.c1, &d1, true);
        self.r2.backward(&cache.c2, &d2, true);
    }

    /// Mean `-Sim(h', h)` over the batch; gradients accumulate when `grads`.
    pub fn loss(&mut self, f: &Mat<R>, eps: &Mat<R>, target: &Mat<f64>, grads: bool) -> Result<f64> {
        ensure_dim(f.rows, target.rows)?;
        ensure_dim(f.cols, target.cols)?;
        let (hhat, cache) = self.forward(f, eps)?;
        let (t, _) = normalize_rows(target)?;
        let n = f.rows as f64;
        let mut loss = 0.0;
        for i in 0..f.rows {
            loss -= hhat.row(i).iter().zip(t.row(i)).map(|(a, b)| a * b).sum::<f64>() / n;
        }
        if grads {
            let mut g = t;
            g.scale(-1.0 / n);
            self.backward(&cache, &g);
        }
        Ok(loss)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(serde_json::json!({"kind": "inference_model", "d": self.d()}));
        a.put_module("model", self);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let d = a.meta.get("d").and_then(|v| v.as_u64()).ok_or_else(|| Error::Checkpoint("archive is not an inference model".into()))?
            as usize;
        let mut m = Self::new(d, &mut ChaCha8Rng::seed_from_u64(0));
        a.load_module("model", &mut m)?;
        Ok(m)
    }
}

impl<R: Real> Module<R> for InferenceModel<R> {
    fn params(&self) -> Vec<(String, &Param<R>)> {
        prefixed("r1", self.r1.params()).chain(prefixed("r2", self.r2.params())).collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        prefixed_mut("r1", self.r1.params_mut()).chain(prefixed_mut("r2", self.r2.params_mut())).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Trailing fraction of rows held out for evaluation. With a single row
    /// the held-out set is that row.
    pub holdout: f64,
}

impl Default for InferenceTrainConfig {
    fn default() -> Self {
        Self { steps: 500, batch: 64, lr: 1e-3, seed: 0, holdout: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrainReport {
    /// Training loss (mean `-Sim`) per step.
    pub curve: Vec<f64>,
    pub heldout_before: f64,
    pub heldout_after: f64,
    pub train_rows: usize,
    pub heldout_rows: usize,
}

fn rows_of(store: &FeatureStore, idx: &[usize]) -> Mat<f64> {
    let d = store.d();
    let mut m = Mat::zeros(idx.len(), d);
    for (r, &i) in idx.iter().enumerate() {
        for (o, &v) in m.row_mut(r).iter_mut().zip(store.row(i)) {
            *o = v as f64;
        }
    }
    m
}

fn check_pairs(images: &FeatureStore, texts: &FeatureStore) -> Result<()> {
    if images.len() != texts.len() {
        return Err(Error::Data(format!("image store has {} rows, text store {}", images.len(), texts.len())));
    }
    if images.d() != texts.d() {
        return Err(Error::Data(format!("image features are {}-d, text features {}-d", images.d(), texts.d())));
    }
    if images.is_empty() {
        return Err(Error::Data("no feature pairs to train on".into()));
    }
    if let Some((a, b)) = images.manifest().iter().zip(texts.manifest()).find(|(a, b)| a.source != b.source) {
        return Err(Error::Data(format!("row {} pairs image {:?} with text {:?}", a.row, a.source, b.source)));
    }
    Ok(())
}

/// Fit the inference model to maximize `Sim(h', h)` between pseudo and real
/// text features of matched rows.
pub fn train_inference_model(
    images: &FeatureStore,
    texts: &FeatureStore,
    mut model: InferenceModel<f32>,
    cfg: &InferenceTrainConfig,
) -> Result<(InferenceModel<f32>, InferenceTrainReport)> {
    check_pairs(images, texts)?;
    ensure_dim(model.d(), images.d())?;
    if cfg.batch == 0 || !(0.0..1.0).contains(&cfg.holdout) {
        return Err(Error::Config("batch must be positive and holdout in [0, 1)".into()));
    }
    let n = images.len();
    let n_hold = ((n as f64 * cfg.holdout).round() as usize).min(n - 1);
    let train: Vec<usize> = (0..n - n_hold).collect();
    let hold: Vec<usize> = if n_hold == 0 { train.clone() } else { (n - n_hold..n).collect() };

    let d = images.d();
    let hold_f: Mat<f32> = rows_of(images, &hold).cast();
    let hold_t = rows_of(texts, &hold);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1);
    let hold_eps = Mat::<f32>::randn(hold.len(), d, &mut eval_rng);
    let heldout_before = model.loss(&hold_f, &hold_eps, &hold_t, false)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    let mut order = train.clone();
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let f: Mat<f32> = rows_of(images, &batch).cast();
        let t = rows_of(texts, &batch);
        let eps = Mat::<f32>::randn(batch.len(), d, &mut rng);
        model.zero_grad();
        let l = model.loss(&f, &eps, &t, true)?;
        opt.step(&mut model);
        if !model.params_finite() {
            return Err(Error::Numerical("inference model parameters diverged".into()));
        }
        curve.push(l);
    }
    let heldout_after = model.loss(&hold_f, &hold_eps, &hold_t, false)?;
    let report = InferenceTrainReport { curve, heldout_before, heldout_after, train_rows: train.len(), heldout_rows: hold.len() };
    Ok((model, report))
}
