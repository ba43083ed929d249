//! Python bindings for the `ris-keygen` simulator.
//!
//! The module mirrors the command line tool's entry points (scenario
//! configuration, single-point runs, parameter sweeps) and exposes the
//! water-filling optimizer and the key-quality scoring helpers on plain
//! Python types. Report rows come back as dictionaries matching the CSV
//! columns; rates are bits per probing round.

use nalgebra::DVector;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ris_keygen::experiments::{self, Algorithm, ReportRow, ScenarioConfig, SweepVar};
use ris_keygen::keypipe;
use ris_keygen::skr::EffectiveNoise;
use ris_keygen::waterfill;

fn err(e: ris_keygen::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Scenario description: geometry, links, powers, probing and run blocks.
///
/// Constructed with library defaults or from a TOML string using the same
/// schema as the CLI config files; the most commonly swept knobs are
/// exposed as properties.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Scenario {
    inner: ScenarioConfig,
}

#[pymethods]
impl Scenario {
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(s) => ScenarioConfig::from_toml_str(s).map_err(err)?,
            None => ScenarioConfig::default(),
        };
        Ok(Self { inner })
    }

    /// The full configuration serialized as TOML.
    fn to_toml(&self) -> PyResult<String> {
        toml::to_string_pretty(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.inner.run.seed
    }
    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.run.seed = v;
    }

    #[getter]
    fn get_trials(&self) -> usize {
        self.inner.run.trials
    }
    #[setter]
    fn set_trials(&mut self, v: usize) {
        self.inner.run.trials = v;
    }

    #[getter]
    fn get_key_rounds(&self) -> usize {
        self.inner.run.key_rounds
    }
    #[setter]
    fn set_key_rounds(&mut self, v: usize) {
        self.inner.run.key_rounds = v;
    }

    #[getter]
    fn get_n(&self) -> usize {
        self.inner.geometry.n
    }
    #[setter]
    fn set_n(&mut self, v: usize) {
        self.inner.geometry.n = v;
    }

    #[getter]
    fn get_m(&self) -> usize {
        self.inner.geometry.m
    }
    #[setter]
    fn set_m(&mut self, v: usize) {
        self.inner.geometry.m = v;
    }

    #[getter]
    fn get_d_r(&self) -> f64 {
        self.inner.geometry.d_r_over_lambda
    }
    #[setter]
    fn set_d_r(&mut self, v: f64) {
        self.inner.geometry.d_r_over_lambda = v;
    }

    #[getter]
    fn get_p_t_dbm(&self) -> f64 {
        self.inner.power.p_t_dbm
    }
    #[setter]
    fn set_p_t_dbm(&mut self, v: f64) {
        self.inner.power.p_t_dbm = v;
    }

    #[getter]
    fn get_noise_dbm(&self) -> f64 {
        self.inner.power.noise_dbm
    }
    #[setter]
    fn set_noise_dbm(&mut self, v: f64) {
        self.inner.power.noise_dbm = v;
    }

    #[getter]
    fn get_rician_k_db(&self) -> f64 {
        self.inner.links.rician_k_db
    }
    #[setter]
    fn set_rician_k_db(&mut self, v: f64) {
        self.inner.links.rician_k_db = v;
    }

    #[getter]
    fn get_k_q(&self) -> usize {
        self.inner.probing.k_q
    }
    #[setter]
    fn set_k_q(&mut self, v: usize) {
        self.inner.probing.k_q = v;
    }

    #[getter]
    fn get_algorithms(&self) -> Vec<String> {
        self.inner.run.algorithms.clone()
    }
    #[setter]
    fn set_algorithms(&mut self, v: Vec<String>) {
        self.inner.run.algorithms = v;
    }

    #[getter]
    fn get_ensemble(&self) -> String {
        self.inner.run.ensemble.clone()
    }
    #[setter]
    fn set_ensemble(&mut self, v: String) {
        self.inner.run.ensemble = v;
    }

    fn __repr__(&self) -> String {
        let g = &self.inner.geometry;
        format!(
            "Scenario(n={}, m={}, d_r={}, p_t_dbm={}, seed={})",
            g.n, g.m, g.d_r_over_lambda, self.inner.power.p_t_dbm, self.inner.run.seed
        )
    }
}

fn row_to_dict<'py>(py: Python<'py>, row: &ReportRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("algorithm", &row.algorithm)?;
    d.set_item("sweep_var", &row.sweep_var)?;
    d.set_item("sweep_value", row.sweep_value)?;
    d.set_item("skr_bits", row.skr_bits)?;
    d.set_item("skr_mc_bits", row.skr_mc_bits)?;
    d.set_item("bdr", row.bdr)?;
    let p = PyDict::new(py);
    for (k, v) in &row.p_values {
        p.set_item(k, *v)?;
    }
    d.set_item("p_values", p)?;
    Ok(d)
}

/// Runs one algorithm at the scenario's operating point.
#[pyfunction]
fn run_case<'py>(py: Python<'py>, scenario: &Scenario, algorithm: &str) -> PyResult<Bound<'py, PyDict>> {
    let algo = Algorithm::parse(algorithm).map_err(err)?;
    let row = experiments::run_case(&scenario.inner, algo).map_err(err)?;
    row_to_dict(py, &row)
}

/// Runs every algorithm configured in the scenario.
#[pyfunction]
fn run_all<'py>(py: Python<'py>, scenario: &Scenario) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = experiments::run_all(&scenario.inner).map_err(err)?;
    rows.iter().map(|r| row_to_dict(py, r)).collect()
}

/// Sweeps one variable (`"pt"`, `"m"`, `"dr"` or `"k"`) over a grid,
/// running every configured algorithm at each point.
#[pyfunction]
fn sweep<'py>(
    py: Python<'py>,
    scenario: &Scenario,
    var: &str,
    grid: Vec<f64>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let var = SweepVar::parse(var).map_err(err)?;
    let rows = experiments::sweep(&scenario.inner, var, &grid).map_err(err)?;
    rows.iter().map(|r| row_to_dict(py, r)).collect()
}

/// Water-filling power allocation over subchannel eigenvalues.
///
/// `p_h` are the cascaded-channel eigenvalues in descending order,
/// `budget` the probing energy, `noise_a`/`noise_b` the effective
/// post-estimation noise variances. Returns the allocation with its water
/// level, per-subchannel floors, and the achieved rate in bits.
#[pyfunction]
fn water_fill<'py>(
    py: Python<'py>,
    p_h: Vec<f64>,
    budget: f64,
    noise_a: f64,
    noise_b: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let noise = EffectiveNoise::new(noise_a, noise_b).map_err(err)?;
    let alloc = waterfill::water_fill(&DVector::from_vec(p_h), budget, &noise).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("p", alloc.p.iter().copied().collect::<Vec<f64>>())?;
    d.set_item("mu", alloc.mu)?;
    d.set_item("active", alloc.active.clone())?;
    d.set_item("gamma", alloc.gamma.iter().copied().collect::<Vec<f64>>())?;
    d.set_item("p_co", alloc.p_co)?;
    d.set_item("budget", alloc.budget)?;
    d.set_item("dropped", alloc.dropped)?;
    d.set_item("skr_bits", alloc.skr(&noise))?;
    Ok(d)
}

/// Bit disagreement rate between two equal-length 0/1 sequences.
#[pyfunction]
fn bdr(bits_a: Vec<u8>, bits_b: Vec<u8>) -> PyResult<f64> {
    keypipe::bdr(&bits_a, &bits_b).map_err(err)
}

/// Randomness screening of a 0/1 sequence (>= 128 bits): p-values for the
/// monobit, block-frequency, runs, longest-run and cumulative-sums tests.
#[pyfunction]
fn randomness_tests<'py>(py: Python<'py>, bits: Vec<u8>) -> PyResult<Bound<'py, PyDict>> {
    let map = keypipe::randomness_tests(&bits).map_err(err)?;
    let d = PyDict::new(py);
    for (k, v) in &map {
        d.set_item(k, *v)?;
    }
    Ok(d)
}

#[pymodule]
fn ris_keygen_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    experiments::init_thread_pool();
    m.add_class::<Scenario>()?;
    m.add_function(wrap_pyfunction!(run_case, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(water_fill, m)?)?;
    m.add_function(wrap_pyfunction!(bdr, m)?)?;
    m.add_function(wrap_pyfunction!(randomness_tests, m)?)?;
    m.add("CSV_HEADER", experiments::CSV_HEADER)?;
    Ok(())
}
