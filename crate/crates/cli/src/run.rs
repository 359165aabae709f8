//! Solver dispatch and result files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use oqsim::exact::{amplitude_damping_state, exact_tcl_rates, one_excitation_amplitude, qbm_coefficients};
use oqsim::heom::{heom_evolve, Closure, HeomOptions};
use oqsim::linalg::{CMatrix, Trajectory};
use oqsim::mastereq::{
    lindblad_evolve, niba_evolve, secular_markov_generator, tcl2_evolve, time_local_evolve, LindbladSpec,
    SystemSpec, Tcl2Options,
};
use oqsim::stochastic::{nmqj_evolve, EnsembleResult, Hops, Sln};
use oqsim::{DensityMatrix, Operator, TimeGrid, C64};

use crate::config::{echo, Method, RunConfig};
use crate::error::CliError;
use crate::model::{self, sample_kernel, Initial, Kernel};

/// Density-matrix series with an optional ensemble standard error
/// (Frobenius norm of the error of the mean).
pub struct Evolution {
    pub times: Vec<f64>,
    pub states: Vec<CMatrix>,
    pub frobenius_stderr: Option<Vec<f64>>,
}

impl Evolution {
    fn deterministic(t: Trajectory) -> Self {
        Self {
            times: t.times,
            states: t.states,
            frobenius_stderr: None,
        }
    }

    fn ensemble(e: EnsembleResult) -> Self {
        let se = e.stderr.iter().map(|s| s * std::f64::consts::SQRT_2).collect();
        Self {
            times: e.times,
            states: e.mean,
            frobenius_stderr: Some(se),
        }
    }
}

pub struct Column {
    pub name: String,
    pub values: Vec<C64>,
    pub stderr: Option<Vec<f64>>,
}

pub struct RunResult {
    pub times: Vec<f64>,
    pub columns: Vec<Column>,
    /// Solver diagnostics recorded in the metadata.
    pub info: toml::Table,
    pub config: RunConfig,
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn grid(cfg: &RunConfig) -> Result<TimeGrid, CliError> {
    TimeGrid::from_t_max(cfg.t_max(), cfg.dt()).map_err(|e| cfg_err(format!("grid: {e}")))
}

fn system(cfg: &RunConfig) -> Result<SystemSpec, CliError> {
    let h = model::hamiltonian(cfg)?;
    let l = model::coupling(cfg)?;
    SystemSpec::new(h, vec![l]).map_err(|e| cfg_err(format!("system: {e}")))
}

/// Two-level emitter coupled through `σ⁻` with no tunnelling term.
fn one_excitation_model(cfg: &RunConfig, method: &str) -> Result<f64, CliError> {
    let s = &cfg.system;
    if s.preset.as_deref() != Some("two_level") || s.delta0 != Some(0.0) {
        return Err(cfg_err(format!("method '{method}' needs system preset 'two_level' with delta0 = 0")));
    }
    if cfg.coupling.operator.as_deref() != Some("sigma_minus") {
        return Err(cfg_err(format!("method '{method}' needs coupling operator 'sigma_minus'")));
    }
    Ok(s.omega.expect("validated"))
}

fn pure_state<'a>(init: &'a Initial, method: &str) -> Result<&'a [C64], CliError> {
    init.psi
        .as_deref()
        .ok_or_else(|| cfg_err(format!("method '{method}' propagates state vectors and needs a pure initial state")))
}

/// Rotating-frame kernel `α(t)e^{iω_s t}` sampled on the grid.
fn rotating_kernel(kernel: &Kernel, omega_s: f64, grid: &TimeGrid, method: &str) -> Result<Vec<C64>, CliError> {
    let alpha = kernel.zero_temperature(method)?;
    let mut v = sample_kernel(&*alpha, grid.len(), grid.dt)?;
    for (k, z) in v.iter_mut().enumerate() {
        *z *= C64::from_polar(1.0, omega_s * k as f64 * grid.dt);
    }
    Ok(v)
}

fn on_grid(samples: &[C64], dt: f64) -> impl Fn(f64) -> C64 + '_ {
    move |t| samples[((t / dt).round() as usize).min(samples.len() - 1)]
}

/// Propagates `rho0` (or the configured initial state) with the configured method.
pub fn evolve(cfg: &RunConfig, rho0: Option<&DensityMatrix>, info: &mut toml::Table) -> Result<Evolution, CliError> {
    let method = cfg.method();
    let name = method.name();
    let grid = grid(cfg)?;
    let init = match rho0 {
        Some(r) => Initial {
            rho: r.clone(),
            psi: None,
        },
        None => model::initial_state(cfg)?,
    };
    let rho0 = &init.rho;
    let solver = CliError::solver(name);
    let kernel = if method.needs_bath() { Some(Kernel::from_config(cfg)?) } else { None };
    let kernel = || kernel.as_ref().expect("bath present");
    let seed = cfg.seed.unwrap_or(0);
    let ev = match method {
        Method::Lindblad => {
            let rate = cfg.lindblad.as_ref().and_then(|b| b.rate).expect("validated") * cfg.strength().powi(2);
            let spec = LindbladSpec::new(system(cfg)?, vec![rate]).map_err(CliError::solver(name))?;
            Evolution::deterministic(lindblad_evolve(&spec, rho0, &grid).map_err(solver)?)
        }
        Method::Tcl2 => {
            let b = cfg.tcl2.as_ref().expect("validated");
            let opts = Tcl2Options {
                substeps: b.substeps.expect("validated"),
                budget: b.budget.expect("validated"),
            };
            let corr = kernel().correlation(&grid, 1e-6)?;
            Evolution::deterministic(tcl2_evolve(&system(cfg)?, &*corr, rho0, &grid, opts).map_err(solver)?)
        }
        Method::Secular => {
            let gen = secular_markov_generator(&system(cfg)?, kernel().bath(name)?).map_err(CliError::solver(name))?;
            info.insert("channels".into(), (gen.channels.len() as i64).into());
            Evolution::deterministic(lindblad_evolve(&gen.lindblad, rho0, &grid).map_err(solver)?)
        }
        Method::Heom => {
            let b = cfg.heom.as_ref().expect("validated");
            let (sum, how) = kernel().expansion(&grid, b.m_max, b.tol.expect("validated"), b.n_exp.expect("validated"))?;
            info.insert("expansion".into(), how.into());
            info.insert("exponentials".into(), (sum.len() as i64).into());
            let opts = HeomOptions {
                closure: if b.closure.as_deref() == Some("markovian") { Closure::Markovian } else { Closure::Truncate },
                max_ados: b.max_ados.expect("validated"),
                substeps: 0,
            };
            let depth = b.depth.expect("validated");
            Evolution::deterministic(heom_evolve(&system(cfg)?, &[sum], rho0, depth, &grid, opts).map_err(solver)?)
        }
        Method::HopsLinear | Method::HopsNonlinear => {
            let b = cfg.hops.as_ref().expect("validated");
            let psi0 = pure_state(&init, name)?;
            let (sum, how) = kernel().expansion(&grid, Some(0), b.fit_tol.expect("validated"), 1)?;
            info.insert("expansion".into(), how.into());
            let hops = Hops::new(&model::hamiltonian(cfg)?, &model::coupling(cfg)?, &sum, &grid, b.k_max.expect("validated"), seed)
                .map_err(CliError::solver(name))?;
            let e = hops
                .ensemble(psi0, b.n_traj.expect("validated"), method == Method::HopsNonlinear)
                .map_err(solver)?;
            info.insert("n_invalid".into(), (e.n_invalid as i64).into());
            Evolution::ensemble(e)
        }
        Method::Sln => {
            let b = cfg.sln.as_ref().expect("validated");
            let k = kernel();
            let alpha: Box<dyn Fn(f64) -> C64> = match k {
                Kernel::Bath(bath) if !matches!(bath.j.kind, oqsim::bath::SpectralKind::Drude { .. }) || bath.j.omega_max.is_some() => {
                    let fine = grid.refined(8);
                    let n = fine.len();
                    let s = sample_kernel(|t| bath.correlation_thermal(t), n, fine.dt)?;
                    let dt = fine.dt;
                    Box::new(move |t| {
                        let x = (t.abs() / dt).min((n - 1) as f64);
                        let i = (x.floor() as usize).min(n - 2);
                        let f = x - i as f64;
                        let z = s[i] * (1.0 - f) + s[i + 1] * f;
                        if t < 0.0 {
                            z.conj()
                        } else {
                            z
                        }
                    })
                }
                _ => {
                    let (sum, how) = k.expansion(&grid, b.m_max, b.tol.expect("validated"), 0)?;
                    info.insert("expansion".into(), how.into());
                    Box::new(move |t| sum.eval(t))
                }
            };
            let sln = Sln::new(
                &model::hamiltonian(cfg)?,
                &model::coupling(cfg)?,
                |t| alpha(t).re,
                |t| alpha(t).im,
                &grid,
                seed,
            )
            .map_err(CliError::solver(name))?;
            let e = sln.ensemble(rho0, b.n_traj.expect("validated")).map_err(solver)?;
            info.insert("n_invalid".into(), (e.n_invalid as i64).into());
            Evolution::ensemble(e)
        }
        Method::Nmqj => {
            let omega = one_excitation_model(cfg, name)?;
            let psi0 = pure_state(&init, name)?;
            let samples = rotating_kernel(kernel(), omega, &grid, name)?;
            let rates = exact_tcl_rates(on_grid(&samples, grid.dt), omega, &grid).map_err(CliError::solver(name))?;
            let n = cfg.nmqj.as_ref().and_then(|b| b.n_traj).expect("validated");
            let r = nmqj_evolve(&rates.time_local_spec(), psi0, &grid, n, seed).map_err(solver)?;
            let backward = r.history.jumps.iter().filter(|j| !j.forward).count();
            info.insert("jumps_forward".into(), ((r.history.jumps.len() - backward) as i64).into());
            info.insert("jumps_backward".into(), (backward as i64).into());
            Evolution::ensemble(r.ensemble)
        }
        Method::Niba => return Err(cfg_err("method 'niba' yields populations only; use run()")),
        Method::ExactAmplitude | Method::Chain => {
            let omega = one_excitation_model(cfg, name)?;
            let u: Vec<C64> = if method == Method::ExactAmplitude {
                let samples = rotating_kernel(kernel(), omega, &grid, name)?;
                one_excitation_amplitude(on_grid(&samples, grid.dt), &grid)
                    .map_err(solver)?
                    .with_system_frequency(omega)
                    .u()
            } else {
                let bath = kernel().bath(name)?;
                if !bath.is_zero_temperature() {
                    return Err(cfg_err("method 'chain' needs a zero-temperature bath (omit bath.beta)"));
                }
                let n = cfg.chain.as_ref().and_then(|b| b.n_sites).expect("validated");
                let coeffs = oqsim::chain::recurrence_coefficients(&bath.j, n).map_err(CliError::solver(name))?;
                let chain = oqsim::chain::star_to_chain(&coeffs);
                let p = oqsim::chain::chain_propagate_one_excitation(omega, &chain, n, &grid).map_err(solver)?;
                info.insert("max_norm_error".into(), p.max_norm_error.into());
                if let Some(t) = p.recurrence_time {
                    info.insert("recurrence_time".into(), t.into());
                    if t < cfg.t_max() {
                        info.insert(
                            "warning".into(),
                            format!("finite-chain recurrence at t = {t}; later times are unreliable").into(),
                        );
                    }
                }
                p.amplitude
            };
            let states = u.iter().map(|&uk| amplitude_damping_state(uk, rho0.matrix())).collect();
            Evolution {
                times: grid.times(),
                states,
                frobenius_stderr: None,
            }
        }
        Method::ExactQbm => {
            if cfg.system.preset.as_deref() != Some("oscillator") || cfg.coupling.operator.as_deref() != Some("a") {
                return Err(cfg_err("method 'exact_qbm' needs system preset 'oscillator' and coupling operator 'a'"));
            }
            let omega = cfg.system.omega.expect("validated");
            let n_max = cfg.system.n_max.expect("validated");
            let (alpha, alpha_plus, stats) = match kernel() {
                Kernel::Exponential(s) => {
                    let a = sample_kernel(|t| Ok(s.eval(t)), grid.len(), grid.dt)?;
                    (a, vec![C64::new(0.0, 0.0); grid.len()], oqsim::bath::Statistics::Bosonic)
                }
                Kernel::Bath(b) => {
                    let a = sample_kernel(|t| oqsim::bath::correlation_zero_t(&b.j, t), grid.len(), grid.dt)?;
                    let p = sample_kernel(|t| b.correlation_pair(t).map(|p| p.1), grid.len(), grid.dt)?;
                    (a, p, b.statistics)
                }
            };
            let q = qbm_coefficients(on_grid(&alpha, grid.dt), on_grid(&alpha_plus, grid.dt), omega, &grid, stats)
                .map_err(CliError::solver(name))?;
            let spec = q.time_local_spec(n_max).map_err(CliError::solver(name))?;
            Evolution::deterministic(time_local_evolve(&spec, rho0, &grid).map_err(solver)?)
        }
        Method::Dephasing => {
            let sol = oqsim::exact::dephasing_exact(&system(cfg)?, kernel().bath(name)?, rho0, &grid).map_err(solver)?;
            Evolution::deterministic(sol.trajectory)
        }
    };
    Ok(ev)
}

fn niba(cfg: &RunConfig, info: &mut toml::Table) -> Result<(Vec<f64>, Vec<Column>), CliError> {
    let s = &cfg.system;
    if s.preset.as_deref() != Some("two_level") || s.omega != Some(0.0) {
        return Err(cfg_err("method 'niba' needs system preset 'two_level' with omega = 0 (unbiased)"));
    }
    if cfg.coupling.operator.as_deref() != Some("sigma_z") {
        return Err(cfg_err("method 'niba' needs coupling operator 'sigma_z'"));
    }
    if cfg.output.density_matrix == Some(true) {
        return Err(cfg_err("method 'niba' yields populations only; density_matrix export is unavailable"));
    }
    let obs = cfg.observables.as_deref().unwrap_or_default();
    if obs.iter().any(|o| o != "sigma_z") {
        return Err(cfg_err("method 'niba' supports only the 'sigma_z' observable"));
    }
    let sign = match cfg.initial.state.as_deref() {
        Some("excited") => 1.0,
        Some("ground") => -1.0,
        _ => return Err(cfg_err("method 'niba' starts from initial state 'excited' or 'ground'")),
    };
    let grid = grid(cfg)?;
    let kernel = Kernel::from_config(cfg)?;
    let bath = kernel.bath("niba")?;
    let p = niba_evolve(s.delta0.expect("validated"), &bath.j, bath.beta, &grid).map_err(CliError::solver("niba"))?;
    info.insert("population_equation".into(), "NIBA".into());
    let values = p.iter().map(|x| C64::new(sign * x, 0.0)).collect();
    let cols = obs
        .iter()
        .map(|_| Column {
            name: "sigma_z".into(),
            values: Vec::clone(&values),
            stderr: None,
        })
        .collect();
    Ok((grid.times(), cols))
}

/// Runs one configuration (no sweep expansion).
pub fn run(cfg: &RunConfig) -> Result<RunResult, CliError> {
    let mut info = toml::Table::new();
    info.insert("method".into(), cfg.method().name().into());
    let (times, columns) = if cfg.method() == Method::Niba {
        niba(cfg, &mut info)?
    } else {
        let ev = evolve(cfg, None, &mut info)?;
        if let Some(se) = &ev.frobenius_stderr {
            info.insert("max_frobenius_stderr".into(), se.iter().cloned().fold(0.0, f64::max).into());
        }
        let cols = model::observables(cfg)?
            .into_iter()
            .map(|(name, op)| observable_column(name, &op, &ev))
            .collect();
        (ev.times, cols)
    };
    info.insert("rows".into(), (times.len() as i64).into());
    Ok(RunResult {
        times,
        columns,
        info,
        config: cfg.clone(),
    })
}

fn observable_column(name: String, op: &Operator, ev: &Evolution) -> Column {
    let values = ev.states.iter().map(|rho| (op.matrix() * rho).trace()).collect();
    // |Tr(A E)| ≤ ‖A‖_F ‖E‖_F bounds the error of the mean of each observable.
    let fro = op.matrix().norm();
    let stderr = ev.frobenius_stderr.as_ref().map(|se| se.iter().map(|s| s * fro).collect());
    Column { name, values, stderr }
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:e}")
}

impl RunResult {
    pub fn csv(&self) -> String {
        let mut out = String::from("t");
        for c in &self.columns {
            write!(out, ",{0}_re,{0}_im", c.name).unwrap();
            if c.stderr.is_some() {
                write!(out, ",{}_stderr", c.name).unwrap();
            }
        }
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            out.push_str(&fmt_f64(*t));
            for c in &self.columns {
                let z = c.values[k];
                write!(out, ",{},{}", fmt_f64(z.re), fmt_f64(z.im)).unwrap();
                if let Some(se) = &c.stderr {
                    write!(out, ",{}", fmt_f64(se[k])).unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn metadata(&self) -> Result<String, CliError> {
        let mut t = toml::Table::new();
        let mut result = self.info.clone();
        result.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        result.insert(
            "columns".into(),
            toml::Value::Array(self.columns.iter().map(|c| c.name.clone().into()).collect()),
        );
        t.insert("result".into(), result.into());
        t.insert("config".into(), echo(&self.config)?.into());
        toml::to_string(&t).map_err(|e| CliError::Io(format!("serializing metadata: {e}")))
    }

    /// Writes `<name>.csv` and `<name>.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        let name = self.config.output_name();
        let csv = dir.join(format!("{name}.csv"));
        let meta = dir.join(format!("{name}.toml"));
        std::fs::write(&csv, self.csv())?;
        std::fs::write(&meta, self.metadata()?)?;
        Ok(vec![csv, meta])
    }
}
