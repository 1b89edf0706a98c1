//! Python bindings. Structured results come back as plain dicts and lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use gsbr_core::dynamics::{self, NoiseSpec, TimeSeries, TraceOptions};
use gsbr_core::gsbr::{self as core, GsbrConfig, Profile};
use gsbr_core::manifold;
use gsbr_core::stochastics::RngStream;

fn err(e: gsbr_core::Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    if e.is_validation() {
        PyValueError::new_err(msg)
    } else {
        PyRuntimeError::new_err(msg)
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let py = obj.py();
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Polynomial delay map.
#[pyclass(name = "MapSpec", module = "gsbr", from_py_object)]
#[derive(Clone)]
struct PyMapSpec {
    inner: dynamics::MapSpec,
}

#[pymethods]
impl PyMapSpec {
    #[new]
    #[pyo3(signature = (coeffs, degree = 2, delay = 2))]
    fn new(coeffs: Vec<f64>, degree: usize, delay: usize) -> PyResult<Self> {
        dynamics::MapSpec::new(delay, degree, coeffs).map(|inner| Self { inner }).map_err(err)
    }

    /// One of `henon`, `dual-henon`, `noninv-quad`, `henon-138`.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        dynamics::MapSpec::preset(name).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn coeffs(&self) -> Vec<f64> {
        self.inner.coeffs.clone()
    }

    #[getter]
    fn degree(&self) -> usize {
        self.inner.degree
    }

    /// `g` at lags given most recent first.
    fn map_eval(&self, lags: Vec<f64>) -> PyResult<f64> {
        self.inner.map_eval(&lags).map_err(err)
    }

    /// `(older, newer) -> (newer, g)`.
    fn step(&self, p: [f64; 2]) -> [f64; 2] {
        self.inner.step(p)
    }

    fn inverse_step(&self, p: [f64; 2]) -> PyResult<[f64; 2]> {
        dynamics::inverse_step(&self.inner, p).map_err(err)
    }

    fn is_invertible(&self) -> bool {
        self.inner.is_invertible()
    }

    fn __repr__(&self) -> String {
        format!("MapSpec(coeffs={:?}, degree={})", self.inner.coeffs, self.inner.degree)
    }
}

fn noise_spec(noise: Option<Vec<(f64, f64)>>) -> PyResult<NoiseSpec> {
    NoiseSpec::mixture(&noise.unwrap_or_default()).map_err(err)
}

/// Sampler configuration: defaults, then the profile budget, then `overrides`.
fn config(profile: Option<&str>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<GsbrConfig> {
    let mut c = GsbrConfig::default();
    if let Some(p) = profile {
        c = c.with_profile(p.parse::<Profile>().map_err(err)?);
    }
    if let Some(o) = overrides {
        let base = to_py(o.py(), &c)?;
        let base = base.cast::<PyDict>()?;
        base.update(o.as_mapping())?;
        c = from_py(base.as_any())?;
    }
    c.validate().map_err(err)?;
    Ok(c)
}

/// Noisy orbit of length `n` from `x0 = [older, newer]`; `noise` is a list of
/// `(weight, variance)` pairs.
#[pyfunction]
#[pyo3(signature = (map, x0, n, seed, noise = None))]
fn simulate(map: &PyMapSpec, x0: Vec<f64>, n: usize, seed: u64, noise: Option<Vec<(f64, f64)>>) -> PyResult<Vec<f64>> {
    dynamics::simulate(&map.inner, &noise_spec(noise)?, &x0, n, seed)
        .map(|s| s.values)
        .map_err(err)
}

/// Saddle fixed points with location in `[lo, hi]`.
#[pyfunction]
fn find_saddle<'py>(py: Python<'py>, map: &PyMapSpec, lo: f64, hi: f64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &dynamics::find_saddle(&map.inner, lo, hi).map_err(err)?)
}

/// Stable manifold of saddle `index` in `[lo, hi]`, as `{points, depth, truncated}`.
#[pyfunction]
#[pyo3(signature = (map, lo = 0.0, hi = 3.0, index = 0, n_back = 16, eps = 1e-4))]
fn trace_stable_manifold<'py>(
    py: Python<'py>,
    map: &PyMapSpec,
    lo: f64,
    hi: f64,
    index: usize,
    n_back: usize,
    eps: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let saddles = dynamics::find_saddle(&map.inner, lo, hi).map_err(err)?;
    let s = saddles
        .get(index)
        .ok_or_else(|| PyValueError::new_err(format!("only {} saddles in [{lo}, {hi}]", saddles.len())))?;
    let opts = TraceOptions {
        n_back,
        eps,
        ..TraceOptions::default()
    };
    to_py(py, &dynamics::trace_stable_manifold(&map.inner, s, &opts).map_err(err)?)
}

/// Unit stable direction at `point` from `steps` forward iterates.
#[pyfunction]
#[pyo3(signature = (map, point, seed, steps = 60))]
fn stable_direction(map: &PyMapSpec, point: [f64; 2], seed: u64, steps: usize) -> PyResult<[f64; 2]> {
    let orbit = dynamics::forward_orbit(&map.inner, point, steps);
    dynamics::stable_direction(&map.inner, point, &orbit, &mut RngStream::new(seed, 0)).map_err(err)
}

/// Default sampler configuration as a dict.
#[pyfunction]
#[pyo3(signature = (profile = None, **overrides))]
fn gsbr_config<'py>(py: Python<'py>, profile: Option<&str>, overrides: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &config(profile, overrides)?)
}

/// One chain on `values`; returns `{samples, diagnostics, ...}`.
#[pyfunction]
#[pyo3(signature = (values, seed, stream = 0, profile = Some("desk"), **overrides))]
fn run_chain<'py>(
    py: Python<'py>,
    values: Vec<f64>,
    seed: u64,
    stream: u64,
    profile: Option<&str>,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let c = config(profile, overrides)?;
    let series = TimeSeries::from_values(values);
    let out = py
        .detach(|| core::run_chain(&c, &series, RngStream::new(seed, stream)))
        .map_err(err)?;
    to_py(py, &out)
}

/// Sliding-window manifold cloud; returns `{points, sources, failures, ...}`.
#[pyfunction]
#[pyo3(signature = (values, k, seed, jobs = None, profile = Some("desk"), **overrides))]
fn manifold_sliding<'py>(
    py: Python<'py>,
    values: Vec<f64>,
    k: usize,
    seed: u64,
    jobs: Option<usize>,
    profile: Option<&str>,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let c = config(profile, overrides)?;
    let series = TimeSeries::from_values(values);
    let cloud = py
        .detach(|| manifold::approximate_manifold_sliding(&series, k, &c, seed, jobs))
        .map_err(err)?;
    to_py(py, &cloud)
}

/// Distances from `points` to a polyline, summarized.
#[pyfunction]
#[pyo3(signature = (points, truth, tol = 0.05, max_gap = 0.05))]
fn cloud_metrics<'py>(
    py: Python<'py>,
    points: Vec<[f64; 2]>,
    truth: Vec<[f64; 2]>,
    tol: f64,
    max_gap: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let line = dynamics::Polyline {
        depth: vec![0; truth.len()],
        points: truth,
        truncated: false,
    };
    to_py(py, &manifold::cloud_metrics(&points, &line, tol, max_gap).map_err(err)?)
}

/// `(unit direction, angle in degrees)` of the principal axis.
#[pyfunction]
fn principal_direction(points: Vec<[f64; 2]>) -> PyResult<([f64; 2], f64)> {
    manifold::principal_direction(&points).map_err(err)
}

#[pymodule]
fn gsbr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMapSpec>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(find_saddle, m)?)?;
    m.add_function(wrap_pyfunction!(trace_stable_manifold, m)?)?;
    m.add_function(wrap_pyfunction!(stable_direction, m)?)?;
    m.add_function(wrap_pyfunction!(gsbr_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_chain, m)?)?;
    m.add_function(wrap_pyfunction!(manifold_sliding, m)?)?;
    m.add_function(wrap_pyfunction!(cloud_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(principal_direction, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
