use pyo3::exceptions::{PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;

use fbm_smp::fbm::{self, HurstParam, TimeGrid};
use fbm_smp::harness::{self, ExperimentConfig};

fn to_py(e: fbm_smp::Error) -> PyErr {
    match e {
        fbm_smp::Error::NotFound(what) => PyFileNotFoundError::new_err(what),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn hurst(h: f64) -> PyResult<HurstParam> {
    HurstParam::new(h).map_err(to_py)
}

/// `R_H(t, s)`.
#[pyfunction]
fn covariance(h: f64, t: f64, s: f64) -> PyResult<f64> {
    fbm::covariance(hurst(h)?, t, s).map_err(to_py)
}

#[pyfunction]
fn kernel_constant(h: f64) -> PyResult<f64> {
    fbm::kernel_constant(hurst(h)?).map_err(to_py)
}

#[pyfunction]
fn kernel_value(h: f64, t: f64, s: f64) -> PyResult<f64> {
    fbm::kernel_value(hurst(h)?, t, s).map_err(to_py)
}

type Sample = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Returns `(t, w, bh)` with `w` and `bh` as lists of paths.
#[pyfunction]
#[pyo3(signature = (h, n_steps, m_paths, seed, horizon = 1.0))]
fn sample_fbm(h: f64, n_steps: usize, m_paths: usize, seed: u64, horizon: f64) -> PyResult<Sample> {
    let grid = TimeGrid::new(horizon, n_steps).map_err(to_py)?;
    let e = fbm::sample_paths(hurst(h)?, grid, m_paths, seed).map_err(to_py)?;
    let w = (0..m_paths).map(|p| e.w_path(p).to_vec()).collect();
    let bh = (0..m_paths).map(|p| e.bh_path(p).to_vec()).collect();
    Ok((grid.nodes(), w, bh))
}

/// Runs a JSON experiment config and returns the record as JSON.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json_str(config_json).map_err(to_py)?;
    let record = py.detach(|| harness::run(&cfg)).map_err(to_py)?;
    serde_json::to_string(&record).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn fbm_smp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(covariance, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_constant, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_value, m)?)?;
    m.add_function(wrap_pyfunction!(sample_fbm, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
