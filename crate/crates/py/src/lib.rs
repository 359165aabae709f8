//! Python bindings: spectral densities, baths and exponential kernels, the
//! direct solvers, chain mapping, and the configuration-driven runner.

use std::path::PathBuf;

use oqsim_cli::{CliError, RunResult};
use oqsim_core::bath::{self, BathSpec, CorrelationSum, ExpTerm, SpectralDensity, Statistics};
use oqsim_core::heom::{heom_evolve, Closure, HeomOptions};
use oqsim_core::linalg::{CMatrix, Trajectory};
use oqsim_core::mastereq::{lindblad_evolve, tcl2_evolve, LindbladSpec, SystemSpec, Tcl2Options};
use oqsim_core::{chain, exact, nonmarkov, DensityMatrix, Error, Operator, TimeGrid, C64};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

create_exception!(oqsim, OqsimError, PyException, "Solver failure.");
create_exception!(oqsim, ConfigError, OqsimError, "Invalid configuration or arguments.");
create_exception!(oqsim, PositivityError, OqsimError, "Jump ensemble lost positivity.");
create_exception!(oqsim, BudgetError, OqsimError, "Run refused by a work budget.");

fn core_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::PositivityViolation { .. } => PositivityError::new_err(msg),
        Error::Budget { .. } => BudgetError::new_err(msg),
        Error::Domain(_) | Error::Dimension(_) | Error::Unsupported(_) | Error::InvalidState(_) => {
            ConfigError::new_err(msg)
        }
        _ => OqsimError::new_err(msg),
    }
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Solver { context, source } => {
            let wrapped = core_err(source);
            Python::attach(|py| PyErr::from_type(wrapped.get_type(py), format!("{context}: {}", wrapped.value(py))))
        }
        CliError::Io(m) => PyOSError::new_err(m),
        other => ConfigError::new_err(other.to_string()),
    }
}

type Rows = Vec<Vec<C64>>;

fn matrix(rows: &Rows) -> PyResult<CMatrix> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(ConfigError::new_err("expected a non-empty square matrix"));
    }
    Ok(CMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn rows(m: &CMatrix) -> Rows {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn operator(r: &Rows) -> PyResult<Operator> {
    Operator::new(matrix(r)?).map_err(core_err)
}

fn density(r: &Rows) -> PyResult<DensityMatrix> {
    DensityMatrix::from_matrix(matrix(r)?).map_err(core_err)
}

fn grid(t_max: f64, dt: f64) -> PyResult<TimeGrid> {
    TimeGrid::from_t_max(t_max, dt).map_err(core_err)
}

/// Spectral density `J(ω)`.
#[pyclass(name = "SpectralDensity", module = "oqsim", frozen, from_py_object)]
#[derive(Clone)]
struct PySpectralDensity(SpectralDensity);

#[pymethods]
impl PySpectralDensity {
    /// `η ω^s ω_c^{1−s} e^{−ω/ω_c}`.
    #[staticmethod]
    fn ohmic(s: f64, eta: f64, omega_c: f64) -> PyResult<Self> {
        SpectralDensity::ohmic(s, eta, omega_c).map(Self).map_err(core_err)
    }

    /// Power law with a hard cutoff at `omega_c`.
    #[staticmethod]
    fn ohmic_hard(s: f64, eta: f64, omega_c: f64) -> PyResult<Self> {
        SpectralDensity::ohmic_hard(s, eta, omega_c).map(Self).map_err(core_err)
    }

    /// `2λγω/(ω² + γ²)`.
    #[staticmethod]
    fn drude(lambda_: f64, gamma: f64) -> PyResult<Self> {
        SpectralDensity::drude(lambda_, gamma).map(Self).map_err(core_err)
    }

    #[staticmethod]
    fn lorentzian(weight: f64, omega0: f64, width: f64, omega_max: f64) -> PyResult<Self> {
        SpectralDensity::lorentzian(weight, omega0, width, omega_max)
            .map(Self)
            .map_err(core_err)
    }

    /// Piecewise-linear table on increasing `omega`.
    #[staticmethod]
    fn tabulated(omega: Vec<f64>, j: Vec<f64>) -> PyResult<Self> {
        SpectralDensity::tabulated(omega, j).map(Self).map_err(core_err)
    }

    fn __call__(&self, omega: f64) -> PyResult<f64> {
        self.0.eval(omega).map_err(core_err)
    }

    /// `∫ J(ω) dω`.
    fn integral(&self) -> PyResult<f64> {
        self.0.integral().map_err(core_err)
    }

    fn __repr__(&self) -> String {
        format!("SpectralDensity({:?})", self.0.kind)
    }
}

/// Harmonic bath at inverse temperature `beta` (`inf` for zero temperature).
#[pyclass(name = "Bath", module = "oqsim", frozen, from_py_object)]
#[derive(Clone)]
struct PyBath(BathSpec);

#[pymethods]
impl PyBath {
    #[new]
    #[pyo3(signature = (j, beta = f64::INFINITY, statistics = "bosonic"))]
    fn new(j: PySpectralDensity, beta: f64, statistics: &str) -> PyResult<Self> {
        let stats = match statistics {
            "bosonic" => Statistics::Bosonic,
            "fermionic" => Statistics::Fermionic,
            other => return Err(ConfigError::new_err(format!("unknown statistics '{other}'"))),
        };
        BathSpec::new(j.0, beta, stats).map(Self).map_err(core_err)
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }

    #[getter]
    fn spectral_density(&self) -> PySpectralDensity {
        PySpectralDensity(self.0.j.clone())
    }

    /// Thermal correlation function `α(t)`.
    fn correlation(&self, t: f64) -> PyResult<C64> {
        self.0.correlation_thermal(t).map_err(core_err)
    }

    fn occupation(&self, omega: f64) -> f64 {
        self.0.occupation(omega)
    }

    /// Drude-bath Matsubara expansion with `m_max` correction terms.
    fn matsubara(&self, m_max: usize) -> PyResult<PyKernel> {
        bath::matsubara_expansion(&self.0, m_max).map(PyKernel).map_err(core_err)
    }

    /// Exponential fit of `α` sampled on `[0, t_max]` with step `dt`.
    #[pyo3(signature = (t_max, dt, n_exp = 4, tol = 1e-3))]
    fn fit(&self, py: Python<'_>, t_max: f64, dt: f64, n_exp: usize, tol: f64) -> PyResult<PyKernel> {
        let g = grid(t_max, dt)?;
        let samples = g
            .times()
            .into_iter()
            .map(|t| self.0.correlation_thermal(t))
            .collect::<Result<Vec<_>, _>>()
            .map_err(core_err)?;
        py.detach(|| bath::fit_correlation(dt, &samples, n_exp, tol))
            .map(|(sum, _)| PyKernel(sum))
            .map_err(core_err)
    }

    fn __repr__(&self) -> String {
        format!("Bath({:?}, beta={})", self.0.j.kind, self.0.beta)
    }
}

/// Correlation function `α(t) = Σ c e^{−μt}` for `t ≥ 0`.
#[pyclass(name = "ExponentialKernel", module = "oqsim", frozen, from_py_object)]
#[derive(Clone)]
struct PyKernel(CorrelationSum);

#[pymethods]
impl PyKernel {
    /// `terms` is a sequence of `(c, mu)` pairs with `Re mu > 0`.
    #[new]
    fn new(terms: Vec<(C64, C64)>) -> PyResult<Self> {
        CorrelationSum::new(terms.into_iter().map(|(c, mu)| ExpTerm { c, mu }).collect())
            .map(Self)
            .map_err(core_err)
    }

    #[getter]
    fn terms(&self) -> Vec<(C64, C64)> {
        self.0.terms().iter().map(|t| (t.c, t.mu)).collect()
    }

    fn __call__(&self, t: f64) -> C64 {
        self.0.eval(t)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("ExponentialKernel({} terms)", self.0.len())
    }
}

/// Reduced density matrices on a time grid.
#[pyclass(name = "Trajectory", module = "oqsim", frozen)]
struct PyTrajectory(Trajectory);

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.0.times.clone()
    }

    /// Density matrices as nested lists.
    #[getter]
    fn states(&self) -> Vec<Rows> {
        self.0.states.iter().map(rows).collect()
    }

    /// `Tr(ρ(t) A)` at every time.
    fn expect(&self, a: Rows) -> PyResult<Vec<C64>> {
        let op = operator(&a)?;
        if op.dim() != self.0.dim() {
            return Err(ConfigError::new_err("operator dimension does not match the states"));
        }
        Ok(self.0.expect(&op))
    }

    fn population(&self, k: usize) -> PyResult<Vec<f64>> {
        if k >= self.0.dim() {
            return Err(ConfigError::new_err(format!("level {k} out of range")));
        }
        Ok(self.0.population(k))
    }

    fn max_trace_error(&self) -> f64 {
        self.0.max_trace_error()
    }

    fn min_eigenvalue(&self) -> f64 {
        self.0.min_eigenvalue()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Hamiltonian plus the operators that couple to the environment.
#[pyclass(name = "System", module = "oqsim", frozen, from_py_object)]
#[derive(Clone)]
struct PySystem(SystemSpec);

#[pymethods]
impl PySystem {
    #[new]
    fn new(h: Rows, couplings: Vec<Rows>) -> PyResult<Self> {
        let ops = couplings.iter().map(operator).collect::<PyResult<Vec<_>>>()?;
        SystemSpec::new(operator(&h)?, ops).map(Self).map_err(core_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }
}

/// Named operators: `sigma_x`, `sigma_y`, `sigma_z`, `sigma_minus`,
/// `sigma_plus`, and `a` (annihilation, needs `n_max`).
#[pyfunction]
#[pyo3(signature = (name, n_max = None))]
fn op(name: &str, n_max: Option<usize>) -> PyResult<Rows> {
    let o = match (name, n_max) {
        ("sigma_x", _) => Operator::sigma_x(),
        ("sigma_y", _) => Operator::sigma_y(),
        ("sigma_z", _) => Operator::sigma_z(),
        ("sigma_minus", _) => Operator::sigma_minus(),
        ("sigma_plus", _) => Operator::sigma_plus(),
        ("a", Some(n)) => Operator::annihilation(n),
        ("a", None) => return Err(ConfigError::new_err("operator 'a' needs n_max")),
        (other, _) => return Err(ConfigError::new_err(format!("unknown operator '{other}'"))),
    };
    Ok(rows(o.matrix()))
}

/// Lindblad evolution with one constant rate per coupling operator.
#[pyfunction]
fn lindblad(py: Python<'_>, system: PySystem, rates: Vec<f64>, rho0: Rows, t_max: f64, dt: f64) -> PyResult<PyTrajectory> {
    let spec = LindbladSpec::new(system.0, rates).map_err(core_err)?;
    let (rho, g) = (density(&rho0)?, grid(t_max, dt)?);
    py.detach(|| lindblad_evolve(&spec, &rho, &g))
        .map(PyTrajectory)
        .map_err(core_err)
}

/// Second-order time-convolutionless equation for a single coupling; `kernel`
/// is a `Bath` or an `ExponentialKernel`.
#[pyfunction]
#[pyo3(signature = (system, kernel, rho0, t_max, dt, substeps = 2))]
fn tcl2(
    py: Python<'_>,
    system: PySystem,
    kernel: &Bound<'_, PyAny>,
    rho0: Rows,
    t_max: f64,
    dt: f64,
    substeps: usize,
) -> PyResult<PyTrajectory> {
    let (rho, g) = (density(&rho0)?, grid(t_max, dt)?);
    let opts = Tcl2Options {
        substeps,
        ..Tcl2Options::default()
    };
    let result = if let Ok(b) = kernel.extract::<PyBath>() {
        py.detach(|| tcl2_evolve(&system.0, &b.0, &rho, &g, opts))
    } else {
        let k = kernel.extract::<PyKernel>()?;
        py.detach(|| tcl2_evolve(&system.0, &k.0, &rho, &g, opts))
    };
    result.map(PyTrajectory).map_err(core_err)
}

/// Hierarchical equations of motion; one exponential kernel per coupling.
#[pyfunction]
#[pyo3(signature = (system, kernels, rho0, t_max, dt, depth, closure = "truncate", max_ados = 200_000))]
#[allow(clippy::too_many_arguments)]
fn heom(
    py: Python<'_>,
    system: PySystem,
    kernels: Vec<PyKernel>,
    rho0: Rows,
    t_max: f64,
    dt: f64,
    depth: u32,
    closure: &str,
    max_ados: u64,
) -> PyResult<PyTrajectory> {
    let closure = match closure {
        "truncate" => Closure::Truncate,
        "markovian" => Closure::Markovian,
        other => return Err(ConfigError::new_err(format!("unknown closure '{other}'"))),
    };
    let (rho, g) = (density(&rho0)?, grid(t_max, dt)?);
    let sums: Vec<CorrelationSum> = kernels.into_iter().map(|k| k.0).collect();
    let opts = HeomOptions {
        closure,
        max_ados,
        ..HeomOptions::default()
    };
    py.detach(|| heom_evolve(&system.0, &sums, &rho, depth, &g, opts))
        .map(PyTrajectory)
        .map_err(core_err)
}

/// Exact excited-state amplitude `u(t)` of a two-level emitter with frequency
/// `omega_s` coupled through `σ⁻` to a zero-temperature kernel.
#[pyfunction]
fn exact_amplitude(py: Python<'_>, kernel: &Bound<'_, PyAny>, omega_s: f64, t_max: f64, dt: f64) -> PyResult<(Vec<f64>, Vec<C64>)> {
    let g = grid(t_max, dt)?;
    let alpha: Box<dyn Fn(f64) -> C64 + Send + Sync> = if let Ok(b) = kernel.extract::<PyBath>() {
        if !b.0.is_zero_temperature() {
            return Err(ConfigError::new_err("the exact amplitude needs a zero-temperature bath"));
        }
        let samples = g
            .times()
            .into_iter()
            .map(|t| b.0.correlation_thermal(t))
            .collect::<Result<Vec<_>, _>>()
            .map_err(core_err)?;
        let dt = g.dt;
        Box::new(move |t: f64| samples[((t / dt).round() as usize).min(samples.len() - 1)])
    } else {
        let k = kernel.extract::<PyKernel>()?;
        Box::new(move |t: f64| k.0.eval(t))
    };
    let rotating = move |t: f64| alpha(t) * C64::from_polar(1.0, omega_s * t);
    let sol = py
        .detach(|| exact::one_excitation_amplitude(rotating, &g))
        .map_err(core_err)?
        .with_system_frequency(omega_s);
    Ok((sol.times.clone(), sol.u()))
}

/// Chain-mapping constants of `j` truncated at `n_sites`.
#[pyfunction]
fn chain_coefficients<'py>(py: Python<'py>, j: PySpectralDensity, n_sites: usize) -> PyResult<Bound<'py, PyDict>> {
    let coeffs = py
        .detach(|| chain::recurrence_coefficients(&j.0, n_sites))
        .map_err(core_err)?;
    let star = chain::gauss_discretize(&coeffs).map_err(core_err)?;
    let d = PyDict::new(py);
    d.set_item("alpha", coeffs.alphas.clone())?;
    d.set_item("beta", coeffs.betas.clone())?;
    d.set_item("omega_c", coeffs.omega_c)?;
    d.set_item("system_coupling", coeffs.sys_coupling())?;
    d.set_item("energies", coeffs.energies())?;
    d.set_item("hoppings", coeffs.hoppings())?;
    d.set_item("nodes", star.nodes.clone())?;
    d.set_item("weights", star.weights.clone())?;
    Ok(d)
}

/// `½‖ρ − σ‖₁`.
#[pyfunction]
fn trace_distance(a: Rows, b: Rows) -> PyResult<f64> {
    nonmarkov::trace_distance(&density(&a)?, &density(&b)?).map_err(core_err)
}

fn toml_to_py<'py>(py: Python<'py>, v: &toml::Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        toml::Value::String(s) => s.into_pyobject(py)?.into_any(),
        toml::Value::Integer(i) => i.into_pyobject(py)?.into_any(),
        toml::Value::Float(f) => f.into_pyobject(py)?.into_any(),
        toml::Value::Boolean(b) => b.into_pyobject(py)?.to_owned().into_any(),
        toml::Value::Datetime(d) => d.to_string().into_pyobject(py)?.into_any(),
        toml::Value::Array(a) => PyList::new(py, a.iter().map(|x| toml_to_py(py, x)).collect::<PyResult<Vec<_>>>()?)?.into_any(),
        toml::Value::Table(t) => table_to_py(py, t)?.into_any(),
    })
}

fn table_to_py<'py>(py: Python<'py>, t: &toml::Table) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in t {
        d.set_item(k, toml_to_py(py, v)?)?;
    }
    Ok(d)
}

fn result_to_py<'py>(py: Python<'py>, r: &RunResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("name", r.config.output_name())?;
    d.set_item("t", r.times.clone())?;
    let values = PyDict::new(py);
    let stderr = PyDict::new(py);
    for c in &r.columns {
        values.set_item(&c.name, c.values.clone())?;
        if let Some(s) = &c.stderr {
            stderr.set_item(&c.name, s.clone())?;
        }
    }
    d.set_item("values", values)?;
    d.set_item("stderr", stderr)?;
    d.set_item("info", table_to_py(py, &r.info)?)?;
    d.set_item("csv", r.csv())?;
    Ok(d)
}

fn parse_table(config: &str, seed: Option<u64>) -> PyResult<toml::Table> {
    let mut table = oqsim_cli::config::parse_value(config).map_err(cli_err)?;
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    Ok(table)
}

fn default_workers(workers: Option<usize>) -> usize {
    workers.unwrap_or_else(rayon::current_num_threads)
}

/// Runs a TOML configuration (same format as the command line tool) and
/// returns one result dict per sweep point.
#[pyfunction]
#[pyo3(signature = (config, seed = None, workers = None, base_dir = None))]
fn simulate<'py>(
    py: Python<'py>,
    config: &str,
    seed: Option<u64>,
    workers: Option<usize>,
    base_dir: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let table = parse_table(config, seed)?;
    let base = base_dir.or_else(|| std::env::current_dir().ok());
    let results = py
        .detach(|| oqsim_cli::run_table(&table, base.as_deref(), default_workers(workers)))
        .map_err(cli_err)?;
    results.iter().map(|r| result_to_py(py, r)).collect()
}

/// Builds the dynamical map of a configuration and returns the trace-distance
/// and divisibility measures with the canonical rates.
#[pyfunction]
#[pyo3(signature = (config, seed = None, workers = None, base_dir = None))]
fn measure<'py>(
    py: Python<'py>,
    config: &str,
    seed: Option<u64>,
    workers: Option<usize>,
    base_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let table = parse_table(config, seed)?;
    let base = base_dir.or_else(|| std::env::current_dir().ok());
    let cfg = oqsim_cli::config::config_from_table(table, base.as_deref()).map_err(cli_err)?;
    let m = py
        .detach(|| oqsim_cli::compute_measures(&cfg, default_workers(workers)))
        .map_err(cli_err)?;
    let d = PyDict::new(py);
    d.set_item("t", m.map.times.clone())?;
    d.set_item("blp", m.blp.value)?;
    d.set_item("blp_direction", m.blp.direction.map(|x| x.to_vec()))?;
    d.set_item("trace_distance", m.blp.distance.clone())?;
    d.set_item("rhp", m.rhp.value)?;
    d.set_item("rhp_g", m.rhp.g.clone())?;
    d.set_item("rates", m.rates.rates.clone())?;
    Ok(d)
}

#[pymodule]
fn oqsim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("OqsimError", py.get_type::<OqsimError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("PositivityError", py.get_type::<PositivityError>())?;
    m.add("BudgetError", py.get_type::<BudgetError>())?;
    m.add_class::<PySpectralDensity>()?;
    m.add_class::<PyBath>()?;
    m.add_class::<PyKernel>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PySystem>()?;
    m.add_function(wrap_pyfunction!(op, m)?)?;
    m.add_function(wrap_pyfunction!(lindblad, m)?)?;
    m.add_function(wrap_pyfunction!(tcl2, m)?)?;
    m.add_function(wrap_pyfunction!(heom, m)?)?;
    m.add_function(wrap_pyfunction!(exact_amplitude, m)?)?;
    m.add_function(wrap_pyfunction!(chain_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(trace_distance, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(measure, m)?)?;
    Ok(())
}
