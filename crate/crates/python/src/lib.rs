//! Python access to the loss, augmentation, metric and experiment entry points.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use hsifsl_core::augment::{self, RmTransform};
use hsifsl_core::config::ExperimentConfig;
use hsifsl_core::losses;
use hsifsl_core::metrics;
use hsifsl_core::patch::Patch;
use hsifsl_core::pipeline::{run_experiment, Sources};
use hsifsl_core::tensor::Tensor;

fn py_err(e: hsifsl_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Tensor::new(vec![n, d], rows.concat()).map_err(py_err)
}

/// OA, AA, Kappa, per-class accuracy and confusion of 1-based labels.
#[pyfunction]
fn compute_metrics<'py>(py: Python<'py>, truth: Vec<u16>, pred: Vec<u16>, n_classes: usize) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::compute_metrics(&truth, &pred, n_classes).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("oa", r.oa)?;
    d.set_item("aa", r.aa)?;
    d.set_item("kappa", r.kappa)?;
    d.set_item("per_class_acc", r.per_class_acc)?;
    d.set_item("confusion", r.confusion)?;
    Ok(d)
}

/// Zero `floor(ratio * len)` random bands; returns `(masked, mask)`.
#[pyfunction]
fn mask_spectrum(spectrum: Vec<f32>, ratio: f64, seed: u64) -> PyResult<(Vec<f32>, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = augment::mask_spectrum(&spectrum, ratio, &mut rng).map_err(py_err)?;
    Ok((m.masked, m.mask))
}

/// Two-view consistency loss of two probability batches.
#[pyfunction]
fn sslcl_loss(p1: Vec<Vec<f64>>, p2: Vec<Vec<f64>>) -> PyResult<f64> {
    let (a, b) = (matrix(&p1)?, matrix(&p2)?);
    losses::evaluate::<f64>(|g| {
        let (z1, z2) = (g.constant(a), g.constant(b));
        losses::sslcl_loss(g, z1, z2)
    })
    .map_err(py_err)
}

/// Row-wise log-probabilities of queries against prototypes (plain Euclidean distance).
#[pyfunction]
fn proto_log_probs(queries: Vec<Vec<f64>>, prototypes: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let (q, p) = (matrix(&queries)?, matrix(&prototypes)?);
    let mut g = hsifsl_core::autograd::Graph::<f64>::new();
    let (q, p) = (g.constant(q), g.constant(p));
    let lp = losses::proto_log_probs(&mut g, q, p, losses::Distance::Euclidean).map_err(py_err)?;
    let t = g.value(lp);
    let (rows, _) = t.dims2().map_err(py_err)?;
    Ok((0..rows).map(|r| t.row(r).to_vec()).collect())
}

/// Apply rotation-mirror transform `transform_id` (1 = identity … 6 = vertical flip) to a
/// row-major `size × size × bands` window.
#[pyfunction]
fn rm_transform(window: Vec<f32>, size: usize, bands: usize, transform_id: usize) -> PyResult<Vec<f32>> {
    let t = RmTransform::from_id(transform_id).map_err(py_err)?;
    let p = Patch::new(size, bands, window).map_err(py_err)?;
    Ok(augment::rm_transform(&p, t).window)
}

/// Resolve a config file (or the defaults) plus `{key: value}` overrides to JSON.
#[pyfunction]
#[pyo3(signature = (path=None, overrides=None))]
fn resolve_config(path: Option<PathBuf>, overrides: Option<Vec<(String, String)>>) -> PyResult<String> {
    let ov = overrides.unwrap_or_default();
    let cfg = match path {
        Some(p) => ExperimentConfig::from_file(&p, &ov),
        None => ExperimentConfig::resolve(json!({}), &ov),
    }
    .map_err(py_err)?;
    Ok(cfg.to_json())
}

/// Run a whole experiment from a config file; returns the aggregate report as JSON.
#[pyfunction]
#[pyo3(signature = (path, out=None))]
fn run(py: Python<'_>, path: PathBuf, out: Option<PathBuf>) -> PyResult<String> {
    let cfg = ExperimentConfig::from_file(&path, &[]).map_err(py_err)?;
    let out = out.unwrap_or_else(|| cfg.out_dir.clone());
    let report = py
        .detach(|| -> hsifsl_core::Result<_> {
            let src = Sources::load(&cfg)?;
            Ok(run_experiment(&cfg, &src, Some(&out))?.report)
        })
        .map_err(py_err)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn hsifsl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(mask_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(sslcl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(proto_log_probs, m)?)?;
    m.add_function(wrap_pyfunction!(rm_transform, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
