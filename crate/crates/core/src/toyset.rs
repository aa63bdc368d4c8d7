//! Procedural shapes dataset with templated captions, and the oracle encoder
//! pair that embeds attributes (not pixels) into the joint feature space.

use crate::error::{Error, Result};
use crate::features::{FeatureVector, ImageEncoder, TextEncoder};
use crate::raster::{Image, CHANNELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

pub const IMAGE_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Orange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 25, 25],
            Color::Green => [25, 200, 40],
            Color::Blue => [30, 60, 235],
            Color::Yellow => [240, 230, 20],
            Color::Cyan => [20, 220, 230],
            Color::Magenta => [225, 30, 220],
            Color::White => [245, 245, 245],
            Color::Orange => [255, 135, 0],
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Shape radius in pixels.
    pub fn radius(self) -> f64 {
        match self {
            Size::Small => 5.5,
            Size::Large => 10.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
}

/// Number of distinct attribute tuples.
pub const NUM_COMBOS: usize = 4 * 8 * 2;

impl Attributes {
    pub fn caption(&self) -> String {
        format!("a {} {} {}", self.size.name(), self.color.name(), self.shape.name())
    }

    /// Inverse of [`Attributes::caption`].
    pub fn parse_caption(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let bad = || Error::Data(format!("unparseable caption {text:?}"));
        let [article, size, color, shape] = words.as_slice() else {
            return Err(bad());
        };
        if *article != "a" {
            return Err(bad());
        }
        let size = Size::ALL.into_iter().find(|s| s.name() == *size).ok_or_else(bad)?;
        let color = Color::ALL.into_iter().find(|c| c.name() == *color).ok_or_else(bad)?;
        let shape = Shape::ALL.into_iter().find(|s| s.name() == *shape).ok_or_else(bad)?;
        Ok(Self { shape, color, size })
    }

    /// Dense index in `0..NUM_COMBOS`.
    pub fn index(&self) -> usize {
        (self.shape as usize * 8 + self.color as usize) * 2 + self.size as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self {
            shape: Shape::ALL[(i / 16) % 4],
            color: Color::ALL[(i / 2) % 8],
            size: Size::ALL[i % 2],
        }
    }

    pub fn all() -> impl Iterator<Item = Attributes> {
        (0..NUM_COMBOS).map(Attributes::from_index)
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            shape: Shape::ALL[rng.random_range(0..4)],
            color: Color::ALL[rng.random_range(0..8)],
            size: Size::ALL[rng.random_range(0..2)],
        }
    }
}

fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => {
            let h = r * 0.85;
            dx.abs() <= h && dy.abs() <= h
        }
        Shape::Triangle => {
            // Upward triangle: apex (0, -r), base at y = 0.8 r, half-width r.
            let base = 0.8 * r;
            if dy < -r || dy > base {
                return false;
            }
            let t = (dy + r) / (base + r);
            dx.abs() <= t * r
        }
        Shape::Cross => {
            let arm = 0.35 * r;
            (dx.abs() <= r && dy.abs() <= arm) || (dy.abs() <= r && dx.abs() <= arm)
        }
    }
}

const SUPERSAMPLE: usize = 4;

/// Render attributes on a black background. `seed` only moves the shape.
pub fn render(attrs: Attributes, seed: u64) -> Image {
    let side = IMAGE_SIDE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = attrs.size.radius();
    let lo = r + 1.0;
    let hi = side as f64 - r - 1.0;
    let cx = rng.random_range(lo..=hi);
    let cy = rng.random_range(lo..=hi);
    let rgb = attrs.color.rgb().map(|v| v as f32 / 127.5 - 1.0);
    let mut pixels = vec![-1f32; side * side * CHANNELS];
    let n = SUPERSAMPLE;
    for py in 0..side {
        for px in 0..side {
            let mut hits = 0usize;
            for sy in 0..n {
                for sx in 0..n {
                    let x = px as f64 + (sx as f64 + 0.5) / n as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / n as f64;
                    if inside(attrs.shape, x - cx, y - cy, r) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f32 / (n * n) as f32;
            let o = (py * side + px) * CHANNELS;
            for ch in 0..CHANNELS {
                pixels[o + ch] = -1.0 * (1.0 - cov) + rgb[ch] * cov;
            }
        }
    }
    Image { side, pixels, attrs: Some(attrs) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub image: Image,
    pub attributes: Attributes,
    pub caption: String,
    pub seed: u64,
}

impl ToySample {
    pub fn new(attributes: Attributes, seed: u64) -> Self {
        Self { image: render(attributes, seed), attributes, caption: attributes.caption(), seed }
    }
}

/// A toy dataset. Captions are read through [`ToyDataset::caption`], which
/// counts accesses so tests can prove language-free training never touches
/// text.
#[derive(Debug)]
pub struct ToyDataset {
    samples: Vec<ToySample>,
    caption_reads: AtomicUsize,
}

impl Clone for ToyDataset {
    fn clone(&self) -> Self {
        Self { samples: self.samples.clone(), caption_reads: AtomicUsize::new(0) }
    }
}

impl ToyDataset {
    pub fn from_samples(samples: Vec<ToySample>) -> Self {
        Self { samples, caption_reads: AtomicUsize::new(0) }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.samples[i].image
    }

    pub fn attributes(&self, i: usize) -> Attributes {
        self.samples[i].attributes
    }

    pub fn caption(&self, i: usize) -> &str {
        self.caption_reads.fetch_add(1, Ordering::Relaxed);
        &self.samples[i].caption
    }

    pub fn caption_reads(&self) -> usize {
        self.caption_reads.load(Ordering::Relaxed)
    }

    pub fn samples(&self) -> &[ToySample] {
        &self.samples
    }

    /// Split off the last `n` samples (e.g. a held-out set).
    pub fn split_tail(mut self, n: usize) -> (ToyDataset, ToyDataset) {
        let at = self.samples.len().saturating_sub(n);
        let tail = self.samples.split_off(at);
        (ToyDataset::from_samples(self.samples), ToyDataset::from_samples(tail))
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = BufWriter::new(std::fs::File::create(dir.join("manifest.jsonl"))?);
        for (i, s) in self.samples.iter().enumerate() {
            let file = format!("{i:06}.png");
            s.image.save_png(&dir.join(&file))?;
            let rec = ManifestRecord {
                file,
                shape: s.attributes.shape,
                color: s.attributes.color,
                size: s.attributes.size,
                caption: s.caption.clone(),
                seed: Some(s.seed),
            };
            serde_json::to_writer(&mut manifest, &rec)?;
            manifest.write_all(b"\n")?;
        }
        manifest.flush()?;
        Ok(())
    }

    /// Load a directory written by [`ToyDataset::write_dir`]. Pixels come from
    /// the PNG files (8-bit quantized); attributes from the manifest.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.jsonl");
        let file = std::fs::File::open(&path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        let mut samples = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)?;
            let attributes = Attributes { shape: rec.shape, color: rec.color, size: rec.size };
            let image = Image::load_png(&dir.join(&rec.file))?.with_attrs(attributes);
            samples.push(ToySample { image, attributes, caption: rec.caption, seed: rec.seed.unwrap_or(0) });
        }
        if samples.is_empty() {
            return Err(Error::Data(format!("{} lists no samples", path.display())));
        }
        Ok(Self::from_samples(samples))
    }
}

/// One line of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Attributes i.i.d. uniform; each sample renders from its own derived seed.
pub fn gen_dataset(n: usize, seed: u64) -> Result<ToyDataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let attrs = Attributes::sample(&mut rng);
            let s: u64 = rng.random();
            ToySample::new(attrs, s)
        })
        .collect();
    Ok(ToyDataset::from_samples(samples))
}

/// Oracle encoder pair: every attribute value owns a seeded random unit
/// direction; an embedding is the normalized sum of its three directions.
/// Image and text of a matched pair map to the same vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleEncoders {
    d: usize,
    shape_dirs: Vec<Vec<f64>>,
    color_dirs: Vec<Vec<f64>>,
    size_dirs: Vec<Vec<f64>>,
}

/// Smallest feature dimension accepted by the oracle: 14 attribute values
/// plus a margin so random directions stay near-orthogonal.
pub const ORACLE_MIN_DIM: usize = 16;

pub fn oracle_encoders(d: usize, seed: u64) -> Result<OracleEncoders> {
    if d < ORACLE_MIN_DIM {
        return Err(Error::Config(format!("oracle encoders need d >= {ORACLE_MIN_DIM}, got {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir = || {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let shape_dirs = (0..4).map(|_| dir()).collect();
    let color_dirs = (0..8).map(|_| dir()).collect();
    let size_dirs = (0..2).map(|_| dir()).collect();
    Ok(OracleEncoders { d, shape_dirs, color_dirs, size_dirs })
}

impl OracleEncoders {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn embed(&self, a: &Attributes) -> FeatureVector {
        let (s, c, z) = (
            &self.shape_dirs[a.shape as usize],
            &self.color_dirs[a.color as usize],
            &self.size_dirs[a.size as usize],
        );
        let sum: Vec<f64> = (0..self.d).map(|i| s[i] + c[i] + z[i]).collect();
        let n = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        FeatureVector::new(sum.into_iter().map(|x| x / n).collect()).expect("finite embedding")
    }
}

impl ImageEncoder for OracleEncoders {
    fn dim(&self) -> usize {
        self.d
    }

    fn encode_image(&self, image: &Image) -> Result<FeatureVector> {
        let attrs = image
            .attrs
            .ok_or_else(|| Error::Data("oracle image encoder needs attribute metadata".into()))?;
        Ok(self.embed(&attrs))
    }
}

impl TextEncoder for OracleEncoders {
    fn dim(&self) -> usize {
        self.d
    }

    fn encode_text(&self, caption: &str) -> Result<FeatureVector> {
        Ok(self.embed(&Attributes::parse_caption(caption)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::cosine_sim;

    #[test]
    fn caption_template() {
        let a = Attributes { shape: Shape::Circle, color: Color::Red, size: Size::Large };
        assert_eq!(a.caption(), "a large red circle");
        assert_eq!(Attributes::parse_caption("a large red circle").unwrap(), a);
        assert!(matches!(Attributes::parse_caption("a huge red circle"), Err(Error::Data(_))));
        assert!(matches!(Attributes::parse_caption("large red circle"), Err(Error::Data(_))));
    }

    #[test]
    fn index_roundtrip_covers_all_combos() {
        let all: Vec<_> = Attributes::all().collect();
        assert_eq!(all.len(), NUM_COMBOS);
        for (i, a) in all.iter().enumerate() {
            assert_eq!(a.index(), i);
        }
    }

    #[test]
    fn single_sample_is_deterministic() {
        let a = gen_dataset(1, 42).unwrap();
        let b = gen_dataset(1, 42).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert!(a.image(0).pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_size_dataset_is_rejected() {
        assert!(gen_dataset(0, 1).is_err());
    }

    #[test]
    fn renders_differ_only_by_position() {
        let a = Attributes { shape: Shape::Cross, color: Color::Blue, size: Size::Small };
        let x = render(a, 1);
        let y = render(a, 2);
        assert_ne!(x.pixels, y.pixels);
        // Same coverage area regardless of position.
        let lit = |im: &Image| im.pixels.iter().map(|&v| (v + 1.0) as f64).sum::<f64>();
        assert!((lit(&x) - lit(&y)).abs() / lit(&x) < 0.05);
    }

    #[test]
    fn oracle_pairs_are_aligned_and_distinct() {
        let enc = oracle_encoders(64, 3).unwrap();
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for a in Attributes::all() {
            let img = render(a, 9);
            let fi = enc.encode_image(&img).unwrap();
            let ft = enc.encode_text(&a.caption()).unwrap();
            assert!((cosine_sim(&fi, &ft).unwrap() - 1.0).abs() < 1e-12);
            assert!(seen.iter().all(|s| s != &fi.values));
            seen.push(fi.values);
        }
    }

    #[test]
    fn oracle_reads_attributes_not_pixels() {
        let enc = oracle_encoders(64, 3).unwrap();
        let a = Attributes { shape: Shape::Triangle, color: Color::Green, size: Size::Large };
        assert_eq!(enc.encode_image(&render(a, 1)).unwrap(), enc.encode_image(&render(a, 2)).unwrap());
        assert!(enc.encode_image(&Image::filled(32, 0.0)).is_err());
    }

    #[test]
    fn fully_different_tuples_are_weakly_correlated() {
        let enc = oracle_encoders(64, 3).unwrap();
        let a = Attributes { shape: Shape::Circle, color: Color::Red, size: Size::Small };
        let b = Attributes { shape: Shape::Square, color: Color::Blue, size: Size::Large };
        let s = cosine_sim(&enc.embed(&a), &enc.embed(&b)).unwrap();
        assert!(s < 0.5, "residual correlation {s}");
    }

    #[test]
    fn small_oracle_dimension_is_rejected() {
        assert!(matches!(oracle_encoders(8, 0), Err(Error::Config(_))));
    }
}
