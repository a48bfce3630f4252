//! Python bindings for the edgeserve simulator.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use edgeserve::model::{satisfied_count as credit, Achieved, Request, RequestId, ServerId};
use edgeserve::placement::bound::{sweep, InstanceParams};
use edgeserve::placement::{Limits, PlacementContext};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Scenario", frozen)]
struct PyScenario {
    inner: edgeserve::Scenario,
}

#[pymethods]
impl PyScenario {
    /// Parses scenario TOML text. `overrides` maps `[control]` keys to values.
    #[staticmethod]
    #[pyo3(signature = (text, overrides = None))]
    fn from_toml(text: &str, overrides: Option<BTreeMap<String, String>>) -> PyResult<Self> {
        let ov: Vec<(String, String)> = overrides.unwrap_or_default().into_iter().collect();
        let inner = edgeserve::load_scenario_with_overrides(text, &ov).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = None))]
    fn load(path: &str, overrides: Option<BTreeMap<String, String>>) -> PyResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PyOSError::new_err(format!("{path}: {e}")))?;
        Self::from_toml(&text, overrides)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.control.seed
    }

    #[getter]
    fn servers(&self) -> usize {
        self.inner.servers.len()
    }

    #[getter]
    fn services(&self) -> Vec<String> {
        self.inner.services.iter().map(|s| s.name.clone()).collect()
    }

    #[getter]
    fn requests(&self) -> usize {
        self.inner.trace.len()
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn trace_csv(&self) -> String {
        self.inner.trace_csv()
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(servers={}, services={}, requests={})",
            self.inner.servers.len(),
            self.inner.services.len(),
            self.inner.trace.len()
        )
    }
}

#[pyclass(name = "Metrics", frozen, get_all)]
struct PyMetrics {
    strategy: String,
    seed: u64,
    submitted: u64,
    satisfied: u64,
    satisfaction: f64,
    goodput: f64,
    mean_offload: f64,
    horizon_ms: u64,
    bypass_violations: u64,
    outcomes: BTreeMap<String, u64>,
}

#[pymethods]
impl PyMetrics {
    fn __repr__(&self) -> String {
        format!(
            "Metrics(strategy={:?}, satisfied={}/{}, goodput={:.3})",
            self.strategy, self.satisfied, self.submitted, self.goodput
        )
    }
}

impl From<&edgeserve::Metrics> for PyMetrics {
    fn from(m: &edgeserve::Metrics) -> Self {
        Self {
            strategy: m.strategy.clone(),
            seed: m.seed,
            submitted: m.submitted,
            satisfied: m.satisfied,
            satisfaction: m.satisfaction(),
            goodput: m.goodput(),
            mean_offload: m.mean_offload_count(),
            horizon_ms: m.horizon_ms,
            bypass_violations: m.bypass_violations,
            outcomes: m.outcomes.iter().map(|(k, v)| (k.as_str().to_string(), *v)).collect(),
        }
    }
}

/// Simulates `scenario` under `strategy`. Output CSVs go to `out` if given.
#[pyfunction]
#[pyo3(signature = (scenario, strategy = "full", seed = None, out = None))]
fn run(py: Python<'_>, scenario: &PyScenario, strategy: &str, seed: Option<u64>, out: Option<&str>) -> PyResult<PyMetrics> {
    let strat = edgeserve::Strategy::parse(strategy).ok_or_else(|| value_err(format!("unknown strategy `{strategy}`")))?;
    let seed = seed.unwrap_or(scenario.inner.control.seed);
    let m = py
        .detach(|| edgeserve::run_strategy(&scenario.inner, strat, seed, None))
        .map_err(value_err)?;
    if let Some(dir) = out {
        edgeserve::emit_metrics(&m, std::path::Path::new(dir)).map_err(|e| PyOSError::new_err(e.to_string()))?;
    }
    Ok(PyMetrics::from(&m))
}

/// First-epoch placement over the whole trace, as a list of dicts.
#[pyfunction]
fn place<'py>(py: Python<'py>, scenario: &PyScenario) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let sc = &scenario.inner;
    let theta = py.detach(|| edgeserve::place(&PlacementContext::whole(sc)));
    theta
        .entries
        .iter()
        .map(|p| {
            let d = PyDict::new(py);
            d.set_item("service", &sc.service(p.service).name)?;
            d.set_item("server", p.server.0)?;
            d.set_item("gpus", p.gpus.iter().map(|g| (g.server.0, g.gpu)).collect::<Vec<_>>())?;
            d.set_item("cross_server", p.cross_server)?;
            d.set_item("bs", p.plan.bs)?;
            d.set_item("mt", p.plan.mt)?;
            Ok(d)
        })
        .collect()
}

/// Returns `(P, 1 / (1 + P))` for the scenario's services.
#[pyfunction]
fn approximation_p(scenario: &PyScenario) -> PyResult<(u32, f64)> {
    let p = edgeserve::approximation_p(&scenario.inner.services).map_err(value_err)?;
    Ok((p.p, p.bound()))
}

/// Credited units for a stream of `frames` frames at `achieved_fps`.
#[pyfunction]
fn satisfied_count(frames: u32, slo_fps: f64, achieved_fps: f64) -> PyResult<u64> {
    let sc = edgeserve::load_scenario(
        "[[gpus]]\nname = \"g\"\n[[servers]]\ngpus = [\"g\"]\n[[services]]\nname = \"s\"\ncompute_demand = 0.5\nvram_demand = 0.5\nlatency_slo_ms = 100\ncompute_time_ms = { g = 1 }\n",
    )
    .map_err(value_err)?;
    let req = Request::new(RequestId(0), &sc.services[0], ServerId(0), 0, frames);
    Ok(credit(&req, Some(slo_fps), Achieved::Rate { fps: achieved_fps }))
}

/// Greedy-versus-optimum check on `seeds` random instances starting at
/// `start`. Returns `(seed, P, bound, phi_greedy, phi_opt)` tuples; instances
/// that exceed the enumeration limit are left out.
#[pyfunction]
#[pyo3(signature = (seeds = 10, start = 0))]
fn verify_bound(py: Python<'_>, seeds: u64, start: u64) -> Vec<(u64, u32, f64, u64, u64)> {
    let results = py.detach(|| sweep(start..start + seeds, InstanceParams::default(), Limits::default()));
    results
        .into_iter()
        .filter_map(|(_, r)| r.ok())
        .map(|b| (b.seed, b.p, b.bound, b.phi_sssp, b.phi_opt))
        .collect()
}

#[pymodule]
fn edgeserve_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyMetrics>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(place, m)?)?;
    m.add_function(wrap_pyfunction!(approximation_p, m)?)?;
    m.add_function(wrap_pyfunction!(satisfied_count, m)?)?;
    m.add_function(wrap_pyfunction!(verify_bound, m)?)?;
    Ok(())
}
