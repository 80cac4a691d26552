//! Python bindings. Feature matrices are lists of equal-length float lists,
//! labels are class indices (0 negative, 1 uncertain, 2 positive).

use std::fs::File;
use std::io::{BufReader, BufWriter};

use gpuq::calibration::{self, IsotonicMap};
use gpuq::corpus::{self, EmbeddingTable, SynthConfig};
use gpuq::ensemble::{self, EnsembleConfig, EnsembleModel};
use gpuq::svgp::{self, SvgpModel, TrainConfig};
use gpuq::{metrics, ClassProbs};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: gpuq::Error) -> PyErr {
    match e {
        gpuq::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    corpus::feature_matrix(rows).map_err(err)
}

fn probs_out(p: Vec<ClassProbs>) -> Vec<[f64; 3]> {
    p.into_iter().map(|p| p.0).collect()
}

fn probs_in(p: Vec<[f64; 3]>) -> Vec<ClassProbs> {
    p.into_iter().map(ClassProbs).collect()
}

fn open(path: &str) -> PyResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))
}

fn create(path: &str) -> PyResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))
}

/// Sparse variational GP classifier.
#[pyclass(name = "SvgpModel", module = "gpuq_py")]
struct PySvgp {
    inner: SvgpModel,
}

#[pymethods]
impl PySvgp {
    /// Inducing points from a seeded subset of the rows; lengthscales from their spread.
    #[staticmethod]
    #[pyo3(signature = (features, num_inducing = svgp::DEFAULT_NUM_INDUCING, seed = 0))]
    fn init(features: Vec<Vec<f64>>, num_inducing: usize, seed: u64) -> PyResult<Self> {
        let xs = matrix(&features)?;
        let inner = svgp::init_model(xs.view(), num_inducing.min(xs.nrows()), seed).map_err(err)?;
        Ok(Self { inner })
    }

    /// Trains in place and returns the per-step minibatch objective.
    #[pyo3(signature = (features, labels, seed = 0, epochs = 2, learning_rate = 0.003, batch_size = 500))]
    fn fit(
        &mut self,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        seed: u64,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
    ) -> PyResult<Vec<f64>> {
        let xs = matrix(&features)?;
        let cfg = TrainConfig { seed, epochs, learning_rate, batch_size, ..TrainConfig::default() };
        let (model, trace) = svgp::fit(&self.inner, xs.view(), &labels, &cfg).map_err(err)?;
        self.inner = model;
        Ok(trace.entries.iter().map(|e| e.elbo).collect())
    }

    #[pyo3(signature = (features, samples = 64, seed = 0))]
    fn predict_proba(&self, features: Vec<Vec<f64>>, samples: usize, seed: u64) -> PyResult<Vec<[f64; 3]>> {
        let xs = matrix(&features)?;
        svgp::predict_proba(&self.inner, xs.view(), samples, seed).map(probs_out).map_err(err)
    }

    fn kl_divergence(&self) -> f64 {
        svgp::kl_divergence(&self.inner)
    }

    #[getter]
    fn num_inducing(&self) -> usize {
        self.inner.num_inducing()
    }

    #[getter]
    fn lengthscales(&self) -> Vec<f64> {
        self.inner.kernel.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(create(path)?).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: SvgpModel::load(open(path)?).map_err(err)? })
    }
}

/// Adversarially trained deep ensemble.
#[pyclass(name = "Ensemble", module = "gpuq_py")]
struct PyEnsemble {
    inner: EnsembleModel,
}

#[pymethods]
impl PyEnsemble {
    #[staticmethod]
    #[pyo3(signature = (features, labels, seed = 0, members = 5, width = 200, epochs = 10))]
    fn fit(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        seed: u64,
        members: usize,
        width: usize,
        epochs: usize,
    ) -> PyResult<Self> {
        let xs = matrix(&features)?;
        let cfg = EnsembleConfig { seed, members, width, epochs, ..EnsembleConfig::default() };
        let (inner, _) = ensemble::fit_ensemble(xs.view(), &labels, &cfg).map_err(err)?;
        Ok(Self { inner })
    }

    fn predict_proba(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<[f64; 3]>> {
        let xs = matrix(&features)?;
        ensemble::ensemble_predict(&self.inner, xs.view()).map(probs_out).map_err(err)
    }

    #[getter]
    fn members(&self) -> usize {
        self.inner.members.len()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(create(path)?).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: EnsembleModel::load(open(path)?).map_err(err)? })
    }
}

/// Monotone step function fitted by pool-adjacent-violators.
#[pyclass(name = "IsotonicMap", module = "gpuq_py")]
struct PyIsotonic {
    inner: IsotonicMap,
}

#[pymethods]
impl PyIsotonic {
    fn __call__(&self, score: f64) -> f64 {
        self.inner.apply(score)
    }

    #[getter]
    fn breakpoints(&self) -> Vec<f64> {
        self.inner.breakpoints().to_vec()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }
}

#[pyfunction]
#[pyo3(signature = (scores, targets, weights = None))]
fn pava_fit(scores: Vec<f64>, targets: Vec<f64>, weights: Option<Vec<f64>>) -> PyResult<PyIsotonic> {
    let inner = calibration::pava_fit(&scores, &targets, weights.as_deref()).map_err(err)?;
    Ok(PyIsotonic { inner })
}

/// One-vs-rest isotonic calibration fitted on `(probs, labels)`, applied to `eval_probs`.
#[pyfunction]
fn calibrate_probs(probs: Vec<[f64; 3]>, labels: Vec<usize>, eval_probs: Vec<[f64; 3]>) -> PyResult<Vec<[f64; 3]>> {
    calibration::calibrate_probs(&probs_in(probs), &labels, &probs_in(eval_probs)).map(probs_out).map_err(err)
}

#[pyfunction]
fn accuracy(probs: Vec<[f64; 3]>, labels: Vec<usize>) -> PyResult<f64> {
    metrics::accuracy(&probs_in(probs), &labels).map_err(err)
}

#[pyfunction]
fn nlpp(probs: Vec<[f64; 3]>, labels: Vec<usize>) -> PyResult<f64> {
    metrics::nlpp(&probs_in(probs), &labels).map_err(err)
}

#[pyfunction]
fn mmpcl(probs: Vec<[f64; 3]>) -> PyResult<f64> {
    metrics::mmpcl(&probs_in(probs)).map_err(err)
}

#[pyfunction]
fn preprocess_text(text: &str) -> Vec<String> {
    corpus::preprocess_text(text)
}

/// Mean in-vocabulary token vector, and whether no token was in the vocabulary.
#[pyfunction]
fn embed_mean(tokens: Vec<String>, table: std::collections::HashMap<String, Vec<f64>>) -> PyResult<(Vec<f64>, bool)> {
    let dim = table.values().next().map_or(0, Vec::len);
    let mut t = EmbeddingTable::new(dim);
    for (k, v) in &table {
        t.insert(k, v).map_err(err)?;
    }
    Ok(corpus::embed_mean(&tokens, &t))
}

type ReportRow = (String, String, String, Option<String>);

/// Synthetic reports as `(id, text, primary, secondary)` tuples.
#[pyfunction]
#[pyo3(signature = (seed, num_examples = 10_000, disagreement_rate = 0.04))]
fn synth_generate(seed: u64, num_examples: usize, disagreement_rate: f64) -> PyResult<Vec<ReportRow>> {
    let cfg = SynthConfig { num_examples, disagreement_rate, ..SynthConfig::default() };
    let raw = corpus::synth_generate(&cfg, seed).map_err(err)?;
    Ok(raw
        .into_iter()
        .map(|r| (r.id, r.text, r.primary_label.to_string(), r.secondary_label.map(|l| l.to_string())))
        .collect())
}

#[pyfunction]
#[pyo3(signature = (dim = 200, seed = 0))]
fn synthetic_embeddings(dim: usize, seed: u64) -> PyResult<std::collections::HashMap<String, Vec<f64>>> {
    let table = corpus::synthetic_embeddings(dim, seed).map_err(err)?;
    Ok(table.tokens().iter().map(|t| (t.clone(), table.get(t).unwrap_or_default().to_vec())).collect())
}

#[pymodule]
fn gpuq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySvgp>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_class::<PyIsotonic>()?;
    m.add_function(wrap_pyfunction!(pava_fit, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_probs, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(nlpp, m)?)?;
    m.add_function(wrap_pyfunction!(mmpcl, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess_text, m)?)?;
    m.add_function(wrap_pyfunction!(embed_mean, m)?)?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_embeddings, m)?)?;
    Ok(())
}
