//! Python bindings for the langfree core: toy data, oracle encoders, pseudo
//! text features, the similarity bound, losses, metrics and trained
//! generators.

use langfree::archive::Archive;
use langfree::eval::{fid as fid_stats, inception_score as is_score, GaussianStats};
use langfree::features::{normalize, FeatureVector, TextEncoder};
use langfree::gan::GeneratorNet;
use langfree::losses::{contrastive, LossWeights};
use langfree::nn::Mat;
use langfree::pseudo::{perturb_fixed as perturb, pseudo_fixed as pseudo, theorem1_bound, theorem1_mc_check, BoundQuery, DensityConvention, FixedPerturbSpec};
use langfree::toyset::{gen_dataset as gen, oracle_encoders, Attributes, OracleEncoders};
use langfree::training::load_generator;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn py_err(e: langfree::Error) -> PyErr {
    match e {
        langfree::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn feature(v: Vec<f64>) -> PyResult<FeatureVector> {
    FeatureVector::new(v).map_err(py_err)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Mat<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok(Mat::from_rows(rows))
}

fn convention(paper_exact: bool) -> DensityConvention {
    if paper_exact {
        DensityConvention::PaperExact
    } else {
        DensityConvention::Sphere
    }
}

/// Toy dataset as a list of `(caption, side, pixels)`; pixels are HWC floats
/// in [-1, 1].
#[pyfunction]
fn gen_dataset(n: usize, seed: u64) -> PyResult<Vec<(String, usize, Vec<f32>)>> {
    let data = gen(n, seed).map_err(py_err)?;
    Ok((0..data.len())
        .map(|i| {
            let img = data.image(i);
            (data.attributes(i).caption(), img.side, img.pixels.clone())
        })
        .collect())
}

/// Oracle-aligned encoder pair: image and caption of the same attributes
/// map to the same unit vector.
#[pyclass(name = "OracleEncoders", frozen)]
struct PyOracle {
    inner: OracleEncoders,
}

#[pymethods]
impl PyOracle {
    #[new]
    fn new(d: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: oracle_encoders(d, seed).map_err(py_err)? })
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.dim()
    }

    fn encode_text(&self, caption: &str) -> PyResult<Vec<f64>> {
        Ok(self.inner.encode_text(caption).map_err(py_err)?.values)
    }

    /// Image feature of a sample with the caption's attributes.
    fn encode_attributes(&self, caption: &str) -> PyResult<Vec<f64>> {
        let a = Attributes::parse_caption(caption).map_err(py_err)?;
        Ok(self.inner.embed(&a).values)
    }
}

/// Unnormalized fixed perturbation `f + xi * |f| * eps / |eps|`.
#[pyfunction]
fn perturb_fixed(f: Vec<f64>, xi: f64, eps: Vec<f64>) -> PyResult<Vec<f64>> {
    perturb(&feature(f)?, &FixedPerturbSpec { xi }, &eps).map_err(py_err)
}

/// Unit pseudo text feature from an image feature.
#[pyfunction]
fn pseudo_fixed(f: Vec<f64>, xi: f64, eps: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(pseudo(&feature(f)?, &FixedPerturbSpec { xi }, &eps).map_err(py_err)?.values().to_vec())
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    langfree::features::cosine_sim(&feature(a)?, &feature(b)?).map_err(py_err)
}

#[pyfunction]
fn unit(v: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(normalize(&feature(v)?).map_err(py_err)?.values().to_vec())
}

/// Closed-form lower bound on `P(Sim(f, h') >= c)`.
#[pyfunction]
#[pyo3(signature = (c, xi, d, paper_exact = false))]
fn similarity_bound(c: f64, xi: f64, d: usize, paper_exact: bool) -> PyResult<f64> {
    theorem1_bound(&BoundQuery { c, xi, d }, convention(paper_exact)).map_err(py_err)
}

/// Monte-Carlo estimate of the same probability:
/// `(empirical, bound, std_err, passed)`.
#[pyfunction]
#[pyo3(signature = (c, xi, d, trials = 100_000, seed = 0, paper_exact = false))]
fn similarity_mc_check(c: f64, xi: f64, d: usize, trials: usize, seed: u64, paper_exact: bool) -> PyResult<(f64, f64, f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = theorem1_mc_check(&BoundQuery { c, xi, d }, trials, &mut rng, convention(paper_exact)).map_err(py_err)?;
    Ok((r.empirical_prob, r.bound, r.std_err, r.passed))
}

/// Contrastive loss between per-sample features and conditions (rows).
#[pyfunction]
#[pyo3(signature = (features, conditions, tau = 0.5, sharpen = true))]
fn contrastive_loss(features: Vec<Vec<f64>>, conditions: Vec<Vec<f64>>, tau: f64, sharpen: bool) -> PyResult<f64> {
    let w = LossWeights { tau, sharpen, ..LossWeights::language_free() };
    contrastive(&matrix(&features)?, &matrix(&conditions)?, &w).map_err(py_err)
}

/// Frechet distance between two Gaussians (covariances as row lists).
#[pyfunction]
fn fid(mean_a: Vec<f64>, cov_a: Vec<Vec<f64>>, mean_b: Vec<f64>, cov_b: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = GaussianStats::new(mean_a, cov_a.concat()).map_err(py_err)?;
    let b = GaussianStats::new(mean_b, cov_b.concat()).map_err(py_err)?;
    fid_stats(&a, &b).map_err(py_err)
}

/// Inception score of per-sample class posteriors: `(mean, std)`.
#[pyfunction]
#[pyo3(signature = (probs, splits = 1))]
fn inception_score(probs: Vec<Vec<f64>>, splits: usize) -> PyResult<(f64, f64)> {
    is_score(&matrix(&probs)?, splits).map_err(py_err)
}

/// Generator loaded from a training checkpoint.
#[pyclass(name = "Generator", frozen)]
struct PyGenerator {
    inner: GeneratorNet<f32>,
}

#[pymethods]
impl PyGenerator {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let a = Archive::load(Path::new(path)).map_err(py_err)?;
        Ok(Self { inner: load_generator(&a).map_err(py_err)? })
    }

    #[getter]
    fn z_dim(&self) -> usize {
        self.inner.config.z_dim
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.config.d
    }

    #[getter]
    fn side(&self) -> usize {
        self.inner.out_side()
    }

    /// HWC pixels in [-1, 1] for a unit condition and a latent.
    fn generate(&self, h: Vec<f64>, z: Vec<f64>) -> PyResult<Vec<f32>> {
        let h = langfree::features::UnitFeature::new(h).map_err(py_err)?;
        Ok(self.inner.generate(&h, &z).map_err(py_err)?.pixels)
    }
}

#[pymodule]
fn langfree_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyOracle>()?;
    m.add_class::<PyGenerator>()?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_fixed, m)?)?;
    m.add_function(wrap_pyfunction!(pseudo_fixed, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(unit, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_bound, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_mc_check, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(inception_score, m)?)?;
    Ok(())
}
