//! Python bindings: model configuration and inference, feature extraction,
//! the PIT loss, scoring metrics, dataset generation and the gradient check
//! suite.
//!
//! Arrays cross the boundary as flat lists of floats plus a shape, in
//! row-major order.

use pyo3::exceptions::{PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;

use stateformer::features::{extract, StftConfig};
use stateformer::numerics::Tensor;
use stateformer::scenegen::{generate_dataset as render_dataset, DatasetSpec, SceneRanges, SplitCounts};
use stateformer::stateformer::{Stateformer, StateformerConfig};
use stateformer::training;
use stateformer::Error;

fn py_err(e: Error) -> PyErr {
    match &e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => PyFileNotFoundError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(|e| py_err(e.into()))
}

/// Model hyperparameters.
#[pyclass(name = "Config", module = "stateformer_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: StateformerConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn full() -> Self {
        PyConfig { inner: StateformerConfig::full() }
    }

    #[staticmethod]
    fn desk() -> Self {
        PyConfig { inner: StateformerConfig::desk() }
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        StateformerConfig::from_text(text).map(|inner| PyConfig { inner }).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn param_count(&self) -> usize {
        Stateformer::param_count(&self.inner)
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.layers
    }

    #[getter]
    fn heads(&self) -> usize {
        self.inner.heads
    }

    #[getter]
    fn max_sources(&self) -> usize {
        self.inner.max_sources
    }

    fn __repr__(&self) -> String {
        format!("Config(d_model={}, layers={}, heads={})", self.inner.d_model, self.inner.layers, self.inner.heads)
    }
}

/// A Stateformer DOA model.
#[pyclass(name = "Model", module = "stateformer_py", unsendable)]
struct PyModel {
    inner: Stateformer,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
        Stateformer::new(config.inner.clone(), seed).map(|inner| PyModel { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Stateformer::load(path).map(|inner| PyModel { inner }).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig { inner: self.inner.cfg.clone() }
    }

    fn param_count(&self) -> usize {
        self.inner.params.count()
    }

    /// `(module, parameter count)` for each top-level module.
    fn module_counts(&self) -> Vec<(String, usize)> {
        self.inner.module_counts()
    }

    /// Direction predictions for features of shape `(planes, bins, frames)`.
    /// Returns a flat `frames × sources × 3` list of unit vectors.
    fn predict(&self, shape: Vec<usize>, data: Vec<f64>) -> PyResult<Vec<f64>> {
        let features = tensor(&shape, data)?;
        self.inner.predict(&features).map_err(|e| py_err(e.into()))
    }
}

/// Features of a 2-channel waveform: `(shape, flat data)` with shape
/// `(planes, bins, frames)`.
#[pyfunction]
fn extract_features(waveform: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let f = extract(&waveform, &StftConfig::default()).map_err(py_err)?;
    Ok((vec![f.planes, f.bins, f.frames], f.data))
}

/// Permutation-invariant masked MSE between flat `frames × sources × 3`
/// predictions and targets. Returns `(loss, perm)` where `perm[s]` is the
/// target track matched to predicted track `s`.
#[pyfunction]
fn pit_mse_loss(pred: Vec<f64>, target: Vec<f64>, mask: Vec<f64>, sources: usize) -> PyResult<(f64, Vec<usize>)> {
    if sources == 0 || mask.len() % sources != 0 {
        return Err(PyValueError::new_err("mask length must be a multiple of sources"));
    }
    let pred = tensor(&[mask.len() / sources, sources, 3], pred)?;
    let pit = training::pit_mse_loss(&pred, &target, &mask).map_err(py_err)?;
    Ok((pit.loss.item(), pit.perm))
}

#[pyfunction]
fn cartesian_to_azimuth(v: [f64; 3]) -> PyResult<f64> {
    training::cartesian_to_azimuth(v).map_err(py_err)
}

/// Mean over samples of each sample's mean absolute error.
#[pyfunction]
fn mae_metric(errors: Vec<Vec<f64>>) -> PyResult<f64> {
    training::mae_metric(&errors).map_err(py_err)
}

/// Percentage of samples whose largest error is at most `threshold`.
#[pyfunction]
fn accuracy_metric(errors: Vec<Vec<f64>>, threshold: f64) -> PyResult<f64> {
    training::accuracy_metric(&errors, threshold).map_err(py_err)
}

/// Renders a synthetic dataset and returns the manifest paths.
#[pyfunction]
#[pyo3(signature = (out_dir, train = 205, val = 20, test = 10, seed = 0, sources = 1, duration = 4.0))]
fn generate_dataset(out_dir: &str, train: usize, val: usize, test: usize, seed: u64, sources: usize, duration: f64) -> PyResult<Vec<String>> {
    let spec = DatasetSpec {
        out_dir: out_dir.into(),
        counts: SplitCounts { train, val, test },
        seed,
        ranges: SceneRanges { n_sources: sources, duration, ..SceneRanges::default() },
        stft: StftConfig::default(),
        jobs: 1,
    };
    let paths = render_dataset(&spec).map_err(py_err)?;
    Ok(paths.into_iter().map(|p| p.display().to_string()).collect())
}

/// Scores a model on a manifest; returns the report as JSON text.
#[pyfunction]
fn evaluate(model: &PyModel, manifest: &str) -> PyResult<String> {
    let samples = training::load_samples(manifest, &StftConfig::default()).map_err(py_err)?;
    let report = training::evaluate(&model.inner, &samples).map_err(py_err)?;
    Ok(report.to_json())
}

/// Runs every gradient check: `(name, max relative error, tolerance, passed)`.
#[pyfunction]
fn gradcheck() -> PyResult<Vec<(String, f64, f64, bool)>> {
    let results = stateformer::verify::gradcheck_suite().map_err(|e| py_err(e.into()))?;
    Ok(results.into_iter().map(|r| (r.name.clone(), r.max_rel_err, r.tolerance, r.passed())).collect())
}

#[pymodule]
fn stateformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(pit_mse_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cartesian_to_azimuth, m)?)?;
    m.add_function(wrap_pyfunction!(mae_metric, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy_metric, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
