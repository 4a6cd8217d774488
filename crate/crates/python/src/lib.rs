//! Python bindings for the histodiff pipeline and its numeric building
//! blocks.

use std::path::PathBuf;

use histodiff::diffusion::NoiseSchedule;
use histodiff::metrics::{self, Averaging, ConfusionMatrix, FeatureStats};
use histodiff::pipeline::{ExperimentConfig, Pipeline, StageName};
use histodiff::sampling::ddim_timesteps as ddim_seq;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: histodiff::Error) -> PyErr {
    match e {
        histodiff::Error::Validation(_) | histodiff::Error::Config(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Cumulative products ᾱ_1..ᾱ_T of a linear β schedule.
#[pyfunction]
#[pyo3(signature = (timesteps=1000, beta_start=1e-4, beta_end=2e-2))]
fn alpha_bars(timesteps: usize, beta_start: f64, beta_end: f64) -> PyResult<Vec<f64>> {
    Ok(NoiseSchedule::linear(timesteps, beta_start, beta_end).map_err(err)?.alpha_bars().to_vec())
}

/// Descending DDIM timestep subsequence from `timesteps` down to 1.
#[pyfunction]
fn ddim_timesteps(timesteps: usize, num_steps: usize) -> PyResult<Vec<usize>> {
    ddim_seq(timesteps, num_steps).map_err(err)
}

fn stats(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<FeatureStats> {
    let d = mean.len();
    if cov.len() != d || cov.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("covariance must be a square matrix matching the mean"));
    }
    Ok(FeatureStats {
        mean: DVector::from_vec(mean),
        covariance: DMatrix::from_fn(d, d, |i, j| cov[i][j]),
        n: 2,
    })
}

/// Fréchet distance between two Gaussians given as (mean, covariance).
#[pyfunction]
fn frechet_distance(mean_a: Vec<f64>, cov_a: Vec<Vec<f64>>, mean_b: Vec<f64>, cov_b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::frechet_distance(&stats(mean_a, cov_a)?, &stats(mean_b, cov_b)?).map_err(err)
}

/// Accuracy, F1, sensitivity and specificity from label and prediction lists.
#[pyfunction]
#[pyo3(signature = (labels, predicted, num_classes, averaging="macro"))]
fn classification_metrics<'py>(
    py: Python<'py>,
    labels: Vec<usize>,
    predicted: Vec<usize>,
    num_classes: usize,
    averaging: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let avg = match averaging {
        "macro" => Averaging::Macro,
        "micro" => Averaging::Micro,
        other => return Err(PyValueError::new_err(format!("unknown averaging `{other}`"))),
    };
    let cm = ConfusionMatrix::from_predictions(&labels, &predicted, num_classes).map_err(err)?;
    let m = metrics::classification_metrics(&cm, avg).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("accuracy", m.accuracy)?;
    out.set_item("f1", m.f1)?;
    out.set_item("sensitivity", m.sensitivity)?;
    out.set_item("specificity", m.specificity)?;
    out.set_item("degenerate_classes", m.degenerate_classes)?;
    Ok(out)
}

fn pipeline(config: Option<PathBuf>, output_dir: Option<PathBuf>, force: bool) -> PyResult<Pipeline> {
    let mut cfg = match config {
        Some(path) => ExperimentConfig::load(&path).map_err(err)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = output_dir {
        cfg.output_dir = out;
    }
    Pipeline::new(cfg, force).map_err(err)
}

/// Writes the procedural benchmark and returns its directory.
#[pyfunction]
#[pyo3(signature = (config=None, output_dir=None))]
fn gen_benchmark(py: Python<'_>, config: Option<PathBuf>, output_dir: Option<PathBuf>) -> PyResult<PathBuf> {
    let p = pipeline(config, output_dir, false)?;
    py.allow_threads(|| p.gen_benchmark()).map_err(err)
}

/// Runs one stage (for every configured seed if it is per-seed) and returns
/// the artifact directories.
#[pyfunction]
#[pyo3(signature = (stage, config=None, output_dir=None, force=false))]
fn run_stage(
    py: Python<'_>,
    stage: &str,
    config: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    force: bool,
) -> PyResult<Vec<PathBuf>> {
    let stage: StageName = stage.parse().map_err(err)?;
    let p = pipeline(config, output_dir, force)?;
    py.allow_threads(|| p.run(stage)).map_err(err)
}

/// Runs the whole experiment and returns the report as CSV text.
#[pyfunction]
#[pyo3(signature = (config=None, output_dir=None, force=false))]
fn run_experiment(py: Python<'_>, config: Option<PathBuf>, output_dir: Option<PathBuf>, force: bool) -> PyResult<String> {
    let p = pipeline(config, output_dir, force)?;
    let report = py.allow_threads(|| p.run_experiment()).map_err(err)?;
    String::from_utf8(report.to_csv().map_err(err)?).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn histodiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(alpha_bars, m)?)?;
    m.add_function(wrap_pyfunction!(ddim_timesteps, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gen_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
