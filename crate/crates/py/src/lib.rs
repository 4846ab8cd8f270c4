use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pythonize::pythonize;

use latentprobe::analysis::stats;
use latentprobe::cmaes::{minimize, CmaConfig};
use latentprobe::config::{RunConfig, RUN_CONFIG_FILE};
use latentprobe::latent::{random_latent as draw_latent, LatentVector, SeededRng};
use latentprobe::pipeline;

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn load_config(dataset: &Path, seed: Option<u64>, config: Option<PathBuf>) -> PyResult<RunConfig> {
    let persisted = dataset.join(RUN_CONFIG_FILE);
    let mut c = match config {
        Some(p) => RunConfig::load(&p).map_err(runtime_err)?,
        None if persisted.exists() => RunConfig::load(&persisted).map_err(runtime_err)?,
        None => RunConfig::default(),
    };
    c.dataset = dataset.to_path_buf();
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

/// Standard-normal latent drawn from the `(seed, label)` stream.
#[pyfunction]
fn random_latent(seed: u64, label: &str, dim: usize) -> PyResult<Vec<f64>> {
    if dim == 0 {
        return Err(PyValueError::new_err("dim must be positive"));
    }
    Ok(draw_latent(&mut SeededRng::new(seed, label), dim).into_inner())
}

/// Pearson r with its two-sided p-value: `(r, p, n)`.
#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64, usize)> {
    let c = stats::pearson(&x, &y).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((c.r, c.p_value, c.n))
}

/// Minimizes a Python callable taking a list of floats.
#[pyfunction]
#[pyo3(signature = (objective, start, sigma0 = 1.0, max_generations = 100, truncation = 0.3, seed = 0))]
fn cma_minimize<'py>(
    py: Python<'py>,
    objective: Py<PyAny>,
    start: Vec<f64>,
    sigma0: f64,
    max_generations: usize,
    truncation: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let start = LatentVector::new(start).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut cfg = CmaConfig::new(start.dim(), seed);
    cfg.sigma0 = sigma0;
    cfg.max_generations = max_generations;
    cfg.truncation = truncation;
    let f = |x: &LatentVector| -> PyResult<f64> {
        Python::attach(|py| objective.call1(py, (x.as_slice().to_vec(),))?.extract::<f64>(py))
    };
    let traj = minimize(&cfg, f, &start).map_err(runtime_err)?;
    let best = traj.best().ok_or_else(|| runtime_err("empty trajectory"))?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("best", best.best_candidate.as_slice().to_vec())?;
    out.set_item("score", best.best_score)?;
    out.set_item("generations", traj.records.len())?;
    out.set_item("evaluations", traj.evaluations())?;
    out.set_item("running_best", traj.running_best())?;
    out.set_item("stop_reason", pythonize(py, &traj.stop_reason)?)?;
    Ok(out.into_any())
}

/// Generates `batches` batches. Without a config file the synthetic oracle is
/// used.
#[pyfunction]
#[pyo3(signature = (dataset, batches, seed = None, dim = None, config = None))]
fn generate<'py>(
    py: Python<'py>,
    dataset: PathBuf,
    batches: usize,
    seed: Option<u64>,
    dim: Option<usize>,
    config: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut c = load_config(&dataset, seed, config)?;
    if let Some(d) = dim {
        c.sampler.dim = d;
    }
    let r = py.detach(|| pipeline::generate(&c, batches)).map_err(runtime_err)?;
    Ok(pythonize(py, &r)?)
}

#[pyfunction]
#[pyo3(signature = (dataset, models = None, retry_missing = false))]
fn score<'py>(
    py: Python<'py>,
    dataset: PathBuf,
    models: Option<Vec<String>>,
    retry_missing: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let c = load_config(&dataset, None, None)?;
    let models = models.unwrap_or_else(|| c.score_models.clone());
    let r = py.detach(|| pipeline::score(&c, &models, retry_missing)).map_err(runtime_err)?;
    Ok(pythonize(py, &r)?)
}

#[pyfunction]
#[pyo3(signature = (dataset, participants = 10, url = None))]
fn simulate<'py>(
    py: Python<'py>,
    dataset: PathBuf,
    participants: usize,
    url: Option<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let c = load_config(&dataset, None, None)?;
    let r = py.detach(|| pipeline::simulate(&c, participants, url.as_deref())).map_err(runtime_err)?;
    Ok(pythonize(py, &r)?)
}

/// Writes report.json to `out` and returns it as a dict.
#[pyfunction]
#[pyo3(signature = (dataset, out, model = None, top_k = None))]
fn analyze<'py>(
    py: Python<'py>,
    dataset: PathBuf,
    out: PathBuf,
    model: Option<String>,
    top_k: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut c = load_config(&dataset, None, None)?;
    if let Some(m) = model {
        c.analysis.model = m;
    }
    if let Some(k) = top_k {
        c.analysis.top_k = k;
    }
    let r = py.detach(|| pipeline::analyze(&c, &out)).map_err(runtime_err)?;
    Ok(pythonize(py, &r.report)?)
}

#[pyfunction]
fn export(py: Python<'_>, dataset: PathBuf, out: PathBuf) -> PyResult<Vec<PathBuf>> {
    let c = load_config(&dataset, None, None)?;
    py.detach(|| pipeline::export(&c, &out)).map_err(runtime_err)
}

#[pymodule]
fn pylatentprobe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(random_latent, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(cma_minimize, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(export, m)?)?;
    Ok(())
}
