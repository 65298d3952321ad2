//! Python bindings: models, filters, oracles, metrics and the experiment
//! harness. Arrays cross the boundary as nested lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dacpf::bench::{self, ExperimentConfig};
use dacpf::filter::{run_filter, DacConfig, TemperingConfig};
use dacpf::metrics::{ks_empirical_vs_gaussian, w1_empirical_vs_gaussian, MarginalTruth};
use dacpf::model::{AuxiliaryFamily, NodeCloud};
use dacpf::oracles::{kalman_filter, run_bootstrap_pf};
use dacpf::resampling::{stratified_resample as stratified, theta_cap, MergeStrategy, DEFAULT_FULL_CAP};
use dacpf::{build_lgssm, build_spatial, DecompositionTree, LgssmModel, LgssmParams, RngStream, SpatialModel, SpatialParams};

fn err(e: dacpf::Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows(flat: &[f64], width: usize) -> Vec<Vec<f64>> {
    flat.chunks_exact(width).map(<[f64]>::to_vec).collect()
}

/// Linear-Gaussian benchmark model on a chain of `d` components.
#[pyclass(frozen)]
struct Lgssm {
    inner: LgssmModel,
}

#[pymethods]
impl Lgssm {
    #[new]
    #[pyo3(signature = (d, tau=1.0, lambda_=1.0, sigma_y2=0.25))]
    fn new(d: usize, tau: f64, lambda_: f64, sigma_y2: f64) -> PyResult<Self> {
        let p = LgssmParams::new(d, tau, lambda_, sigma_y2).map_err(err)?;
        Ok(Lgssm { inner: build_lgssm(p).map_err(err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.params.d
    }

    /// Returns `(states, observations)`, each `t` lists of `d` floats.
    #[pyo3(signature = (t, seed=0))]
    fn simulate(&self, t: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        dacpf::model::simulate(&self.inner, t, &mut RngStream::new(seed).rng())
    }

    /// Exact filtering marginals: per time, a list of `(mean, variance)`.
    fn kalman(&self, ys: Vec<Vec<f64>>) -> PyResult<Vec<Vec<(f64, f64)>>> {
        let states = kalman_filter(&self.inner.params, &ys).map_err(err)?;
        Ok(states.iter().map(|s| s.marginals().iter().map(|m| (m.mean, m.var)).collect()).collect())
    }
}

/// Spatial lattice model with Student-t observations.
#[pyclass(frozen)]
struct Spatial {
    inner: SpatialModel,
}

#[pymethods]
impl Spatial {
    #[new]
    #[pyo3(signature = (rows, cols, sigma_x2=1.0, tau=-0.25, r_y=1, nu=10.0))]
    fn new(rows: usize, cols: usize, sigma_x2: f64, tau: f64, r_y: usize, nu: f64) -> PyResult<Self> {
        let p = SpatialParams { rows, cols, sigma_x2, tau, r_y, nu };
        Ok(Spatial { inner: build_spatial(p).map_err(err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.params.num_vertices()
    }

    #[pyo3(signature = (t, seed=0))]
    fn simulate(&self, t: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        dacpf::model::simulate(&self.inner, t, &mut RngStream::new(seed).rng())
    }
}

fn with_aux<R>(model: &Bound<'_, PyAny>, f: impl FnOnce(&dyn AuxiliaryFamily) -> R) -> PyResult<R> {
    if let Ok(m) = model.cast::<Lgssm>() {
        return Ok(f(&m.get().inner));
    }
    if let Ok(m) = model.cast::<Spatial>() {
        return Ok(f(&m.get().inner));
    }
    Err(PyValueError::new_err("model must be Lgssm or Spatial"))
}

fn strategy(name: &str, n: usize, theta: Option<usize>, ess_target: Option<f64>) -> PyResult<MergeStrategy> {
    Ok(match name {
        "adaptive" => MergeStrategy::Adaptive { ess_target, theta_cap: None },
        "lightweight" => MergeStrategy::Lightweight { theta: theta.unwrap_or(theta_cap(n)) },
        "full" => MergeStrategy::Full { cap: DEFAULT_FULL_CAP.max(n) },
        "linear" => MergeStrategy::Linear,
        _ => return Err(PyValueError::new_err(format!("unknown strategy '{name}'"))),
    })
}

/// Runs the divide-and-conquer filter. Returns a dict with per-time root
/// means, the final particles, and per-time `(level, theta)` merge records.
#[pyfunction]
#[pyo3(signature = (model, ys, n, strategy="adaptive", theta=None, ess_target=None, temper=false, seed=0))]
#[allow(clippy::too_many_arguments)]
fn run_dac<'py>(
    py: Python<'py>,
    model: &Bound<'py, PyAny>,
    ys: Vec<Vec<f64>>,
    n: usize,
    strategy: &str,
    theta: Option<usize>,
    ess_target: Option<f64>,
    temper: bool,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut config = DacConfig::new(n, self::strategy(strategy, n, theta, ess_target)?);
    if temper {
        config.tempering = Some(TemperingConfig::default());
    }
    let mut means = Vec::new();
    let mut thetas = Vec::new();
    let (last, dim) = with_aux(model, |m| {
        let last = py.detach(|| {
            run_filter(m, &ys, &config, &RngStream::new(seed), |s, d| {
                means.push(s.root_cloud.mean());
                thetas.push(d.nodes.iter().map(|nd| (nd.level, nd.theta)).collect::<Vec<_>>());
            })
        });
        (last, m.dim())
    })?;
    let last = last.map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("means", means)?;
    out.set_item("particles", rows(&last.root_cloud.particles, dim))?;
    out.set_item("theta", thetas)?;
    Ok(out)
}

/// Runs the bootstrap particle filter; returns `(per-time means, final particles)`.
#[pyfunction]
#[pyo3(signature = (model, ys, n, seed=0))]
fn run_bootstrap(py: Python<'_>, model: &Bound<'_, PyAny>, ys: Vec<Vec<f64>>, n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut means = Vec::new();
    let (last, dim) = with_aux(model, |m| {
        let last = py.detach(|| run_bootstrap_pf(m, &ys, n, &RngStream::new(seed), |_, c| means.push(c.mean())));
        (last, m.dim())
    })?;
    let last: NodeCloud = last.map_err(err)?;
    Ok((means, rows(&last.particles, dim)))
}

#[pyfunction]
fn w1(samples: Vec<f64>, mean: f64, var: f64) -> f64 {
    w1_empirical_vs_gaussian(&samples, MarginalTruth { mean, var })
}

#[pyfunction]
fn ks(samples: Vec<f64>, mean: f64, var: f64) -> f64 {
    ks_empirical_vs_gaussian(&samples, MarginalTruth { mean, var })
}

#[pyfunction]
#[pyo3(signature = (probabilities, count, seed=0))]
fn stratified_resample(probabilities: Vec<f64>, count: usize, seed: u64) -> PyResult<Vec<usize>> {
    stratified(&probabilities, count, &mut RngStream::new(seed).rng()).map_err(err)
}

/// Nodes of a decomposition tree as `(lo, hi, parent, height)`, root first.
#[pyfunction]
#[pyo3(signature = (d=None, rows=None, cols=None))]
fn tree(d: Option<usize>, rows: Option<usize>, cols: Option<usize>) -> PyResult<Vec<(usize, usize, Option<usize>, usize)>> {
    let t = match (d, rows, cols) {
        (Some(d), None, None) if d > 0 => DecompositionTree::chain(d),
        (None, Some(r), Some(c)) if r > 0 && c > 0 => DecompositionTree::lattice(r, c),
        _ => return Err(PyValueError::new_err("give either d or rows and cols")),
    };
    Ok(t.nodes().iter().map(|n| (n.lo, n.hi, n.parent, n.height)).collect())
}

/// Runs one experiment from `key = value` settings (the config-file keys)
/// and returns the number of repetitions written.
#[pyfunction]
fn run_experiment(py: Python<'_>, settings: Vec<(String, String)>) -> PyResult<usize> {
    let config = ExperimentConfig::from_pairs(settings).map_err(err)?;
    py.detach(|| bench::run_experiment(&config)).map(|r| r.len()).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (name, out, full_scale=false))]
fn run_preset(py: Python<'_>, name: &str, out: PathBuf, full_scale: bool) -> PyResult<()> {
    py.detach(|| bench::run_preset(name, &out, full_scale)).map_err(err)
}

#[pyfunction]
fn summarize(input: PathBuf, out: PathBuf) -> PyResult<()> {
    bench::summarize(&input, &out).map_err(err)
}

#[pymodule]
fn pydacpf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Lgssm>()?;
    m.add_class::<Spatial>()?;
    m.add_function(wrap_pyfunction!(run_dac, m)?)?;
    m.add_function(wrap_pyfunction!(run_bootstrap, m)?)?;
    m.add_function(wrap_pyfunction!(w1, m)?)?;
    m.add_function(wrap_pyfunction!(ks, m)?)?;
    m.add_function(wrap_pyfunction!(stratified_resample, m)?)?;
    m.add_function(wrap_pyfunction!(tree, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_preset, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    Ok(())
}
