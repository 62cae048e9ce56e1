//! Python bindings: the pipeline commands plus point-set alignment.
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ::semvo::config::RunConfig;
use ::semvo::geoalign::{self, Correspondence};
use ::semvo::geometry::Point3;
use ::semvo::pipeline::{self, PipelineError};

fn to_py(e: PipelineError) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn load(config: Option<PathBuf>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p).map_err(|e| to_py(e.into()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Hash of the effective configuration.
#[pyfunction]
#[pyo3(signature = (config=None, seed=None))]
fn config_hash(config: Option<PathBuf>, seed: Option<u64>) -> PyResult<String> {
    Ok(load(config, seed)?.hash())
}

/// Generate a dataset into `out`; returns the configuration hash.
#[pyfunction]
#[pyo3(signature = (out, config=None, seed=None))]
fn simulate(py: Python<'_>, out: PathBuf, config: Option<PathBuf>, seed: Option<u64>) -> PyResult<String> {
    let cfg = load(config, seed)?;
    let m = py.detach(|| pipeline::cmd_simulate(&cfg, &out)).map_err(to_py)?;
    Ok(m.config_hash)
}

/// Build the benchmark library of a dataset; returns the number of frames.
#[pyfunction]
#[pyo3(signature = (dataset, out, config=None))]
fn build_library(py: Python<'_>, dataset: PathBuf, out: PathBuf, config: Option<PathBuf>) -> PyResult<usize> {
    let cfg = load(config, None)?;
    py.detach(|| pipeline::cmd_build_library(&dataset, &cfg, &out)).map_err(to_py)
}

/// Localize the drive of a dataset; returns `(frames, elements, solves)`.
#[pyfunction]
#[pyo3(signature = (dataset, library, out, config=None, strip_ids=false))]
fn localize(
    py: Python<'_>,
    dataset: PathBuf,
    library: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    strip_ids: bool,
) -> PyResult<(usize, usize, usize)> {
    let mut cfg = load(config, None)?;
    cfg.localize.strip_ids |= strip_ids;
    let r = py.detach(|| pipeline::cmd_localize(&dataset, &library, &cfg, &out)).map_err(to_py)?;
    Ok((r.corrected.len(), r.reported.len(), r.solves))
}

/// Evaluate a localization run; returns the metric table.
#[pyfunction]
#[pyo3(signature = (dataset, run, out, config=None, before_after=false))]
fn evaluate(
    py: Python<'_>,
    dataset: PathBuf,
    run: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    before_after: bool,
) -> PyResult<String> {
    let cfg = load(config, None)?;
    py.detach(|| {
        pipeline::cmd_evaluate(&dataset, &run, &cfg, &out, before_after)?;
        pipeline::cmd_report(&out)
    })
    .map_err(to_py)
}

/// Metric table of an evaluation directory.
#[pyfunction]
fn report(run: PathBuf) -> PyResult<String> {
    pipeline::cmd_report(&run).map_err(to_py)
}

/// Rigid transform taking `world` points onto `geo` points.
///
/// Returns `(rotation, translation, rms)` with the rotation as three rows.
#[pyfunction]
fn align(world: Vec<[f64; 3]>, geo: Vec<[f64; 3]>) -> PyResult<([[f64; 3]; 3], [f64; 3], f64)> {
    if world.len() != geo.len() {
        return Err(PyValueError::new_err(format!("{} world points but {} geo points", world.len(), geo.len())));
    }
    let pairs: Vec<Correspondence> = world
        .iter()
        .zip(&geo)
        .map(|(p, d)| Correspondence { p: Point3::from(*p), d: Point3::from(*d) })
        .collect();
    let tf = geoalign::solve_rigid_alignment(&pairs).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let r = tf.rotation;
    let rows = [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]);
    Ok((rows, tf.translation.into(), tf.rms_residual))
}

#[pymodule]
fn semvo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(build_library, m)?)?;
    m.add_function(wrap_pyfunction!(localize, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    Ok(())
}
