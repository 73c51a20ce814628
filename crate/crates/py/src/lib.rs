//! Python bindings for the segdec training library.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use segdec::config::RunConfig;
use segdec::eval;
use segdec::loss::{self, MixSchedule};
use segdec::sampling::{self, SamplerState};
use segdec::{Error, SynthSpec};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Schedule { .. } | Error::Metric(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn mask_from_rows(rows: &[Vec<u8>]) -> PyResult<Array2<u8>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask rows must all have the same length"));
    }
    Array2::from_shape_vec((h, w), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows<T: Copy>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Segmentation share of the loss at `epoch`.
#[pyfunction]
#[pyo3(signature = (epoch, total_epochs, dynamic = true))]
fn lambda_at(epoch: usize, total_epochs: usize, dynamic: bool) -> PyResult<f64> {
    let schedule = MixSchedule::new(total_epochs, 1.0, dynamic).map_err(to_py)?;
    loss::lambda_at(epoch, &schedule).map_err(to_py)
}

#[pyfunction]
fn total_loss(seg_loss: f64, cls_loss: f64, lam: f64, delta: f64) -> PyResult<f64> {
    loss::total_loss(seg_loss, cls_loss, lam, delta).map_err(to_py)
}

/// Per-pixel loss weights for a binary mask given as a list of rows.
#[pyfunction]
#[pyo3(signature = (mask, w_pos, p, dist_transform = true))]
fn weight_mask(mask: Vec<Vec<u8>>, w_pos: f64, p: f64, dist_transform: bool) -> PyResult<Vec<Vec<f32>>> {
    let m = mask_from_rows(&mask)?;
    let wm = loss::compute_weight_mask(&m, w_pos, p, dist_transform).map_err(to_py)?;
    Ok(rows(&wm.weights))
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::average_precision(&scores, &labels).map_err(to_py)
}

/// Threshold with the highest F1 and the confusion counts there.
#[pyfunction]
fn best_f_measure<'py>(py: Python<'py>, scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Bound<'py, PyDict>> {
    let b = eval::best_f_measure(&scores, &labels).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("threshold", b.threshold)?;
    d.set_item("f1", b.f1)?;
    d.set_item("tp", b.tp)?;
    d.set_item("fp", b.fp)?;
    d.set_item("fn", b.fn_)?;
    d.set_item("tn", b.tn)?;
    d.set_item("tpr", b.tpr)?;
    d.set_item("tnr", b.tnr)?;
    Ok(d)
}

/// Synthetic samples as dicts with `id`, `label`, `image` and `mask`.
#[pyfunction]
#[pyo3(signature = (n_pos, n_neg, size = 128, defect = "blob", noise_level = 0.05, seed = 0))]
fn synth<'py>(
    py: Python<'py>,
    n_pos: usize,
    n_neg: usize,
    size: usize,
    defect: &str,
    noise_level: f64,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let spec = SynthSpec { n_pos, n_neg, size, defect: defect.parse().map_err(to_py)?, noise_level };
    spec.validate(1).map_err(to_py)?;
    let split = segdec::data::synth_generate(&spec, seed);
    split
        .samples()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("id", &s.id)?;
            d.set_item("label", s.label)?;
            let gray = s.image.index_axis(ndarray::Axis(2), 0).to_owned();
            d.set_item("image", rows(&gray))?;
            d.set_item("mask", rows(&s.mask))?;
            Ok(d)
        })
        .collect()
}

/// Runs the command line with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    segdec::cli::run(std::iter::once("segdec".to_string()).chain(args))
}

/// Negative sampler with usage counts.
#[pyclass(name = "Sampler")]
struct PySampler {
    state: SamplerState,
}

#[pymethods]
impl PySampler {
    #[new]
    #[pyo3(signature = (seed, freq_enabled = true))]
    fn new(seed: u64, freq_enabled: bool) -> Self {
        Self { state: SamplerState::new(seed, freq_enabled) }
    }

    fn select(&mut self, negatives: Vec<usize>, k: usize) -> PyResult<Vec<usize>> {
        sampling::select_negatives(&mut self.state, &negatives, k).map_err(to_py)
    }

    /// One epoch as `(is_positive, id)` pairs.
    fn epoch_stream(&mut self, positives: Vec<usize>, negatives: Vec<usize>) -> PyResult<Vec<(bool, usize)>> {
        let stream = sampling::build_epoch_stream(&positives, &negatives, &mut self.state).map_err(to_py)?;
        Ok(stream.iter().map(|s| (s.is_positive(), s.id())).collect())
    }

    fn counts(&self) -> BTreeMap<usize, u64> {
        self.state.usage_counts().clone()
    }

    fn total_usage(&self) -> u64 {
        self.state.total_usage()
    }
}

/// Flat key = value run configuration.
#[pyclass(name = "Config")]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path = None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => RunConfig::from_file(&p).map_err(to_py)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).ok_or_else(|| PyValueError::new_err(format!("unknown key '{key}'")))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn to_kv(&self) -> String {
        self.inner.to_kv()
    }
}

#[pymodule]
fn segdec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(lambda_at, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(weight_mask, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(best_f_measure, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<PySampler>()?;
    m.add_class::<PyConfig>()?;
    Ok(())
}
