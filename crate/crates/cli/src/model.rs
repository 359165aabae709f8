//! Turns a validated [`RunConfig`] into solver inputs.

use oqsim::bath::{
    correlation_zero_t, fit_correlation, matsubara_converged, matsubara_expansion, BathSpec, Correlation,
    CorrelationSum, CutoffShape, SpectralDensity, SpectralKind, Statistics,
};
use oqsim::linalg::{c, eigh, re, CMatrix};
use oqsim::{DensityMatrix, Operator, TimeGrid, C64};

use crate::config::{BathConfig, MatrixSpec, RunConfig};
use crate::error::CliError;

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn matrix(spec: &MatrixSpec, field: &str) -> Result<Operator, CliError> {
    let d = spec.len();
    let entries: Vec<C64> = spec.iter().flatten().map(|p| c(p[0], p[1])).collect();
    Operator::from_rows(d, &entries).map_err(|e| cfg_err(format!("{field}: {e}")))
}

pub fn hamiltonian(cfg: &RunConfig) -> Result<Operator, CliError> {
    let s = &cfg.system;
    match s.preset.as_deref() {
        Some("two_level") => {
            let w = s.omega.unwrap_or(0.0);
            let d0 = s.delta0.unwrap_or(0.0);
            Ok(Operator::new(
                Operator::sigma_z().matrix() * re(0.5 * w) + Operator::sigma_x().matrix() * re(0.5 * d0),
            )
            .expect("finite two-level Hamiltonian"))
        }
        Some("oscillator") => {
            let a = Operator::annihilation(s.n_max.unwrap_or(1));
            Ok(Operator::new(a.dagger().matrix() * a.matrix() * re(s.omega.unwrap_or(0.0))).expect("finite"))
        }
        _ => matrix(s.h.as_ref().expect("validated"), "system.h"),
    }
}

/// Named operators; `rho_i_j` is the functional whose expectation is `ρ_ij`.
pub fn named_operator(name: &str, d: usize) -> Result<Operator, CliError> {
    let two = |op: Operator| {
        if d == 2 {
            Ok(op)
        } else {
            Err(cfg_err(format!("operator '{name}' needs a two-level system, dimension is {d}")))
        }
    };
    let osc = || Operator::annihilation(d - 1);
    match name {
        "sigma_x" => two(Operator::sigma_x()),
        "sigma_y" => two(Operator::sigma_y()),
        "sigma_z" => two(Operator::sigma_z()),
        "sigma_minus" => two(Operator::sigma_minus()),
        "sigma_plus" => two(Operator::sigma_plus()),
        "identity" => Ok(Operator::identity(d)),
        "a" => Ok(osc()),
        "a_dag" => Ok(osc().dagger()),
        "n" => Ok(Operator::new(osc().dagger().matrix() * osc().matrix()).expect("finite")),
        "x" => {
            let a = osc();
            Ok(Operator::new((a.matrix() + a.dagger().matrix()) * re(std::f64::consts::FRAC_1_SQRT_2)).expect("finite"))
        }
        "p" => {
            let a = osc();
            Ok(Operator::new((a.dagger().matrix() - a.matrix()) * c(0.0, std::f64::consts::FRAC_1_SQRT_2))
                .expect("finite"))
        }
        _ => {
            if let Some((i, j)) = name.strip_prefix("rho_").and_then(|r| r.split_once('_')) {
                let (i, j): (usize, usize) = match (i.parse(), j.parse()) {
                    (Ok(i), Ok(j)) => (i, j),
                    _ => return Err(cfg_err(format!("bad matrix-element name '{name}'"))),
                };
                if i >= d || j >= d {
                    return Err(cfg_err(format!("'{name}' out of range for dimension {d}")));
                }
                let mut m = CMatrix::zeros(d, d);
                m[(j, i)] = re(1.0);
                return Ok(Operator::new(m).expect("finite"));
            }
            Err(cfg_err(format!("unknown operator '{name}'")))
        }
    }
}

pub fn coupling(cfg: &RunConfig) -> Result<Operator, CliError> {
    let c = &cfg.coupling;
    match (&c.operator, &c.matrix) {
        (Some(name), _) => named_operator(name, cfg.dim()),
        (_, Some(m)) => matrix(m, "coupling.matrix"),
        _ => unreachable!("validated"),
    }
}

pub fn observables(cfg: &RunConfig) -> Result<Vec<(String, Operator)>, CliError> {
    let d = cfg.dim();
    let mut out = Vec::new();
    for name in cfg.observables.as_deref().unwrap_or_default() {
        out.push((name.clone(), named_operator(name, d)?));
    }
    if cfg.output.density_matrix == Some(true) {
        for i in 0..d {
            for j in 0..d {
                let name = format!("rho_{i}_{j}");
                if !out.iter().any(|(n, _)| *n == name) {
                    let op = named_operator(&name, d)?;
                    out.push((name, op));
                }
            }
        }
    }
    Ok(out)
}

/// Initial state plus its state vector when it is pure.
pub struct Initial {
    pub rho: DensityMatrix,
    pub psi: Option<Vec<C64>>,
}

pub fn initial_state(cfg: &RunConfig) -> Result<Initial, CliError> {
    let d = cfg.dim();
    let i = &cfg.initial;
    let from_psi = |psi: Vec<C64>| -> Result<Initial, CliError> {
        if psi.len() != d {
            return Err(cfg_err(format!("initial state has {} amplitudes, dimension is {d}", psi.len())));
        }
        let n = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(cfg_err("initial state vector has zero norm"));
        }
        let psi: Vec<C64> = psi.iter().map(|z| z / n).collect();
        let rho = DensityMatrix::pure(&psi).map_err(|e| cfg_err(format!("initial state: {e}")))?;
        Ok(Initial { rho, psi: Some(psi) })
    };
    if let Some(p) = &i.psi {
        return from_psi(p.iter().map(|z| c(z[0], z[1])).collect());
    }
    if let Some(m) = &i.rho {
        let op = matrix(m, "initial.rho")?;
        if op.dim() != d {
            return Err(cfg_err(format!("initial.rho has dimension {}, system has {d}", op.dim())));
        }
        let rho = DensityMatrix::new(op).map_err(|e| cfg_err(format!("initial.rho: {e}")))?;
        let (ev, v) = eigh(rho.matrix());
        let psi = (ev[d - 1] > 1.0 - 1e-10).then(|| v.column(d - 1).iter().copied().collect());
        return Ok(Initial { rho, psi });
    }
    let name = i.state.as_deref().expect("validated");
    let unit = |k: usize| -> Vec<C64> { (0..d).map(|j| re(if j == k { 1.0 } else { 0.0 })).collect() };
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let need_two = || {
        if d == 2 {
            Ok(())
        } else {
            Err(cfg_err(format!("initial state '{name}' needs a two-level system")))
        }
    };
    match name {
        "excited" => need_two().and_then(|_| from_psi(unit(0))),
        "ground" => need_two().and_then(|_| from_psi(unit(1))),
        "plus" => need_two().and_then(|_| from_psi(vec![re(s), re(s)])),
        "minus" => need_two().and_then(|_| from_psi(vec![re(s), re(-s)])),
        "mixed" => Ok(Initial {
            rho: DensityMatrix::maximally_mixed(d),
            psi: None,
        }),
        _ => {
            let k = name
                .strip_prefix("basis:")
                .or_else(|| name.strip_prefix("fock:"))
                .and_then(|k| k.parse::<usize>().ok())
                .ok_or_else(|| cfg_err(format!("unknown initial state '{name}'")))?;
            if k >= d {
                return Err(cfg_err(format!("initial state '{name}' out of range for dimension {d}")));
            }
            from_psi(unit(k))
        }
    }
}

/// Spectral density with the coupling strength squared folded into its prefactor.
pub fn spectral_density(b: &BathConfig, s2: f64) -> Result<SpectralDensity, CliError> {
    let kind = b.kind.as_deref().expect("validated");
    let v = |x: Option<f64>| x.expect("validated");
    let sd = match kind {
        "ohmic" | "ohmic_hard" => SpectralDensity::new(
            SpectralKind::OhmicFamily {
                s: v(b.s),
                eta: v(b.eta) * s2,
                omega_c: v(b.omega_c),
                cutoff: if kind == "ohmic" { CutoffShape::Exponential } else { CutoffShape::Hard },
            },
            b.omega_max,
        ),
        "drude" => SpectralDensity::new(
            SpectralKind::Drude {
                lambda: v(b.lambda) * s2,
                gamma: v(b.gamma),
            },
            b.omega_max,
        ),
        "lorentzian" => SpectralDensity::lorentzian(v(b.weight) * s2, v(b.omega0), v(b.width), v(b.omega_max)),
        "tabulated" => {
            let path = b.file.as_deref().expect("validated");
            let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("reading {path}: {e}")))?;
            let sd = SpectralDensity::from_table_text(&text).map_err(|e| cfg_err(format!("{path}: {e}")))?;
            match sd.kind {
                SpectralKind::Tabulated { omega, j } => {
                    SpectralDensity::tabulated(omega, j.iter().map(|x| x * s2).collect())
                }
                _ => unreachable!(),
            }
        }
        "exponential" => return Err(cfg_err("bath kind 'exponential' has no spectral density")),
        other => return Err(cfg_err(format!("unknown bath kind '{other}'"))),
    };
    sd.map_err(|e| cfg_err(format!("bath: {e}")))
}

/// Bath correlation source for the solvers.
pub enum Kernel {
    /// `g e^{−(γ + iω₀)t}` at zero temperature.
    Exponential(CorrelationSum),
    Bath(BathSpec),
}

impl Kernel {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, CliError> {
        let b = cfg.bath();
        let s2 = cfg.strength().powi(2);
        if b.kind.as_deref() == Some("exponential") {
            let g = b.g.expect("validated") * s2;
            let gamma = b.gamma.expect("validated");
            let w0 = b.omega0.unwrap_or(0.0);
            return Ok(Kernel::Exponential(
                CorrelationSum::single(re(g), c(gamma, w0)).map_err(|e| cfg_err(format!("bath: {e}")))?,
            ));
        }
        let stats = match b.statistics.as_deref() {
            Some("fermionic") => Statistics::Fermionic,
            _ => Statistics::Bosonic,
        };
        let beta = b.beta.unwrap_or(f64::INFINITY);
        let bath = BathSpec::new(spectral_density(b, s2)?, beta, stats).map_err(|e| cfg_err(format!("bath: {e}")))?;
        Ok(Kernel::Bath(bath))
    }

    pub fn bath(&self, method: &str) -> Result<&BathSpec, CliError> {
        match self {
            Kernel::Bath(b) => Ok(b),
            Kernel::Exponential(_) => Err(cfg_err(format!("method '{method}' needs a spectral density, not an exponential kernel"))),
        }
    }

    fn is_drude(&self) -> bool {
        matches!(self, Kernel::Bath(b) if matches!(b.j.kind, SpectralKind::Drude { .. }) && b.j.omega_max.is_none())
    }

    /// Multi-exponential form: the kernel itself, a Matsubara sum for Drude
    /// baths (fixed `m_max` or converged to `tol`), or a fit with `n_exp` terms.
    pub fn expansion(&self, grid: &TimeGrid, m_max: Option<usize>, tol: f64, n_exp: usize) -> Result<(CorrelationSum, String), CliError> {
        let t_end = grid.t_end().max(2.0 * grid.dt);
        match self {
            Kernel::Exponential(s) => Ok((s.clone(), "exponential kernel".into())),
            Kernel::Bath(b) if self.is_drude() => match m_max {
                Some(m) => Ok((
                    matsubara_expansion(b, m).map_err(CliError::solver("bath"))?,
                    format!("Matsubara m_max = {m}"),
                )),
                None => {
                    let (sum, m, res) = matsubara_converged(b, tol, grid.dt, t_end).map_err(CliError::solver("bath"))?;
                    Ok((sum, format!("Matsubara m_max = {m} (residual {res:e})")))
                }
            },
            Kernel::Bath(b) => {
                let n = ((t_end / grid.dt).ceil() as usize + 1).max(4 * n_exp + 4);
                let dt = t_end / (n - 1) as f64;
                let samples: Vec<C64> = (0..n)
                    .map(|k| b.correlation_thermal(k as f64 * dt))
                    .collect::<oqsim::Result<_>>()
                    .map_err(CliError::solver("bath"))?;
                let (sum, res) = fit_correlation(dt, &samples, n_exp, tol).map_err(CliError::solver("bath fit"))?;
                Ok((sum, format!("{n_exp}-exponential fit (residual {res:e})")))
            }
        }
    }

    /// Correlation object for perturbative solvers.
    pub fn correlation(&self, grid: &TimeGrid, tol: f64) -> Result<Box<dyn Correlation>, CliError> {
        match self {
            Kernel::Exponential(s) => Ok(Box::new(s.clone())),
            Kernel::Bath(_) if self.is_drude() => Ok(Box::new(self.expansion(grid, None, tol, 0)?.0)),
            Kernel::Bath(b) => Ok(Box::new(b.clone())),
        }
    }

    /// Zero-temperature laboratory-frame kernel `∫J e^{−iωt}`.
    pub fn zero_temperature(&self, method: &str) -> Result<Box<dyn Fn(f64) -> oqsim::Result<C64> + Sync + '_>, CliError> {
        match self {
            Kernel::Exponential(s) => Ok(Box::new(move |t| Ok(s.eval(t)))),
            Kernel::Bath(b) => {
                if !b.is_zero_temperature() {
                    return Err(cfg_err(format!("method '{method}' needs a zero-temperature bath (omit bath.beta)")));
                }
                Ok(Box::new(move |t| correlation_zero_t(&b.j, t)))
            }
        }
    }
}

/// Samples `f` on `n` points spaced by `dt`, surfacing the first error.
pub fn sample_kernel<F: Fn(f64) -> oqsim::Result<C64>>(f: F, n: usize, dt: f64) -> Result<Vec<C64>, CliError> {
    (0..n).map(|k| f(k as f64 * dt)).collect::<oqsim::Result<_>>().map_err(CliError::solver("bath"))
}
