//! Run configuration: TOML schema, unknown-key detection and validation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Complex matrix as rows of `[re, im]` pairs.
pub type MatrixSpec = Vec<Vec<[f64; 2]>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lindblad,
    Tcl2,
    Secular,
    Heom,
    HopsLinear,
    HopsNonlinear,
    Sln,
    Nmqj,
    Niba,
    ExactAmplitude,
    ExactQbm,
    Chain,
    Dephasing,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lindblad => "lindblad",
            Method::Tcl2 => "tcl2",
            Method::Secular => "secular",
            Method::Heom => "heom",
            Method::HopsLinear => "hops_linear",
            Method::HopsNonlinear => "hops_nonlinear",
            Method::Sln => "sln",
            Method::Nmqj => "nmqj",
            Method::Niba => "niba",
            Method::ExactAmplitude => "exact_amplitude",
            Method::ExactQbm => "exact_qbm",
            Method::Chain => "chain",
            Method::Dephasing => "dephasing",
        }
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, Method::HopsLinear | Method::HopsNonlinear | Method::Sln | Method::Nmqj)
    }

    pub fn needs_bath(self) -> bool {
        self != Method::Lindblad
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// `two_level`, `oscillator` or `matrix`.
    pub preset: Option<String>,
    /// Level splitting (two-level) or oscillator frequency.
    pub omega: Option<f64>,
    /// Tunnelling amplitude of the two-level preset.
    pub delta0: Option<f64>,
    /// Highest Fock level kept for the oscillator preset.
    pub n_max: Option<usize>,
    /// Explicit Hamiltonian for the matrix preset.
    pub h: Option<MatrixSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CouplingConfig {
    pub operator: Option<String>,
    pub matrix: Option<MatrixSpec>,
    /// Multiplies the coupling; the bath correlation scales with its square.
    pub strength: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BathConfig {
    /// `ohmic`, `ohmic_hard`, `drude`, `lorentzian`, `tabulated` or `exponential`.
    pub kind: Option<String>,
    pub s: Option<f64>,
    pub eta: Option<f64>,
    pub omega_c: Option<f64>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub weight: Option<f64>,
    pub omega0: Option<f64>,
    pub width: Option<f64>,
    pub omega_max: Option<f64>,
    /// Two-column `ω J(ω)` file for the tabulated kind.
    pub file: Option<String>,
    /// Prefactor of the exponential kernel `g e^{−(γ + iω₀)t}`.
    pub g: Option<f64>,
    /// Inverse temperature; `inf` is zero temperature.
    pub beta: Option<f64>,
    pub statistics: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub t_max: Option<f64>,
    pub dt: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InitialConfig {
    /// `excited`, `ground`, `plus`, `minus`, `mixed`, `basis:K` or `fock:K`.
    pub state: Option<String>,
    pub psi: Option<Vec<[f64; 2]>>,
    pub rho: Option<MatrixSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    /// File stem for the CSV and metadata files.
    pub name: Option<String>,
    /// Also export every density-matrix element as `rho_ij` columns.
    pub density_matrix: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LindbladBlock {
    pub rate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tcl2Block {
    pub substeps: Option<usize>,
    pub budget: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeomBlock {
    pub depth: Option<u32>,
    /// Fixed number of Matsubara terms; otherwise chosen from `tol`.
    pub m_max: Option<usize>,
    pub tol: Option<f64>,
    /// Exponentials fitted to non-Drude kernels.
    pub n_exp: Option<usize>,
    /// `truncate` or `markovian`.
    pub closure: Option<String>,
    pub max_ados: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HopsBlock {
    pub k_max: Option<usize>,
    pub n_traj: Option<usize>,
    /// Residual accepted when fitting a single exponential to the kernel.
    pub fit_tol: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlnBlock {
    pub n_traj: Option<usize>,
    pub m_max: Option<usize>,
    pub tol: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NmqjBlock {
    pub n_traj: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainBlock {
    pub n_sites: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasureBlock {
    /// Bloch-sphere directions scanned by the trace-distance measure.
    pub directions: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Dotted path of a numeric key, e.g. `coupling.strength`.
    pub key: Option<String>,
    pub values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub observables: Option<Vec<String>>,
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default)]
    pub coupling: CouplingConfig,
    pub bath: Option<BathConfig>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub output: OutputConfig,
    pub lindblad: Option<LindbladBlock>,
    pub tcl2: Option<Tcl2Block>,
    pub heom: Option<HeomBlock>,
    pub hops: Option<HopsBlock>,
    pub sln: Option<SlnBlock>,
    pub nmqj: Option<NmqjBlock>,
    pub chain: Option<ChainBlock>,
    pub measure: Option<MeasureBlock>,
    pub sweep: Option<SweepConfig>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn require<T: Copy>(v: Option<T>, method: Method, field: &str) -> Result<T, CliError> {
    v.ok_or_else(|| config_err(format!("method '{}' requires field '{field}'", method.name())))
}

fn positive(v: f64, field: &str) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(format!("{field} must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn method(&self) -> Method {
        self.method.expect("validated config has a method")
    }

    pub fn dim(&self) -> usize {
        match self.system.preset.as_deref() {
            Some("two_level") => 2,
            Some("oscillator") => self.system.n_max.unwrap_or(0) + 1,
            _ => self.system.h.as_ref().map_or(0, Vec::len),
        }
    }

    pub fn t_max(&self) -> f64 {
        self.grid.t_max.expect("validated")
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt.expect("validated")
    }

    pub fn strength(&self) -> f64 {
        self.coupling.strength.unwrap_or(1.0)
    }

    pub fn bath(&self) -> &BathConfig {
        self.bath.as_ref().expect("validated config has a bath")
    }

    pub fn output_name(&self) -> &str {
        self.output.name.as_deref().unwrap_or("run")
    }

    /// Fills every defaulted field and checks method requirements.
    fn resolve(&mut self, base: Option<&Path>) -> Result<(), CliError> {
        let method = self.method.ok_or_else(|| config_err("missing required key 'method'"))?;
        self.resolve_system()?;
        self.resolve_coupling()?;
        self.resolve_grid()?;
        if method.needs_bath() {
            let bath = self
                .bath
                .as_mut()
                .ok_or_else(|| config_err(format!("method '{}' requires a [bath] block", method.name())))?;
            resolve_bath(bath, base)?;
        } else if let Some(b) = self.bath.as_mut() {
            resolve_bath(b, base)?;
        }
        if method.is_stochastic() && self.seed.is_none() {
            return Err(config_err(format!(
                "method '{}' is stochastic and requires 'seed' (or --seed)",
                method.name()
            )));
        }
        self.resolve_method_block(method)?;
        self.resolve_initial()?;
        if self.observables.as_ref().is_none_or(Vec::is_empty) {
            let default = match self.system.preset.as_deref() {
                Some("two_level") => vec!["sigma_z".to_string()],
                Some("oscillator") => vec!["n".to_string()],
                _ => vec!["rho_00".to_string()],
            };
            self.observables = Some(default);
        }
        self.output.name.get_or_insert_with(|| "run".into());
        self.output.density_matrix.get_or_insert(false);
        if let Some(m) = self.measure.as_mut() {
            m.directions.get_or_insert(200);
        }
        if let Some(sw) = &self.sweep {
            if sw.key.is_none() || sw.values.as_ref().is_none_or(Vec::is_empty) {
                return Err(config_err("[sweep] needs 'key' and a non-empty 'values' list"));
            }
        }
        Ok(())
    }

    fn resolve_system(&mut self) -> Result<(), CliError> {
        let s = &mut self.system;
        let preset = s.preset.get_or_insert_with(|| if s.h.is_some() { "matrix".into() } else { String::new() });
        match preset.as_str() {
            "two_level" => {
                let w = s.omega.ok_or_else(|| config_err("system preset 'two_level' requires 'omega'"))?;
                if !w.is_finite() {
                    return Err(config_err("system.omega must be finite"));
                }
                s.delta0.get_or_insert(0.0);
                if s.n_max.is_some() || s.h.is_some() {
                    return Err(config_err("system preset 'two_level' takes only 'omega' and 'delta0'"));
                }
            }
            "oscillator" => {
                let w = s.omega.ok_or_else(|| config_err("system preset 'oscillator' requires 'omega'"))?;
                positive(w, "system.omega")?;
                let n = s.n_max.ok_or_else(|| config_err("system preset 'oscillator' requires 'n_max'"))?;
                if n == 0 {
                    return Err(config_err("system.n_max must be at least 1"));
                }
                if s.delta0.is_some() || s.h.is_some() {
                    return Err(config_err("system preset 'oscillator' takes only 'omega' and 'n_max'"));
                }
            }
            "matrix" => {
                let h = s.h.as_ref().ok_or_else(|| config_err("system preset 'matrix' requires 'h'"))?;
                check_square(h, "system.h")?;
            }
            "" => return Err(config_err("[system] needs 'preset' (two_level, oscillator, matrix) or 'h'")),
            other => return Err(config_err(format!("unknown system preset '{other}'"))),
        }
        Ok(())
    }

    fn resolve_coupling(&mut self) -> Result<(), CliError> {
        let d = self.dim();
        let c = &mut self.coupling;
        match (&c.operator, &c.matrix) {
            (Some(_), Some(_)) => return Err(config_err("[coupling] takes either 'operator' or 'matrix', not both")),
            (None, None) => return Err(config_err("[coupling] needs 'operator' or 'matrix'")),
            (None, Some(m)) => {
                check_square(m, "coupling.matrix")?;
                if m.len() != d {
                    return Err(config_err(format!("coupling.matrix is {}x{0}, system dimension is {d}", m.len())));
                }
            }
            (Some(_), None) => {}
        }
        let s = *c.strength.get_or_insert(1.0);
        if !s.is_finite() {
            return Err(config_err("coupling.strength must be finite"));
        }
        Ok(())
    }

    fn resolve_grid(&mut self) -> Result<(), CliError> {
        let t = self.grid.t_max.ok_or_else(|| config_err("[grid] requires 't_max'"))?;
        let dt = self.grid.dt.ok_or_else(|| config_err("[grid] requires 'dt'"))?;
        positive(t, "grid.t_max")?;
        positive(dt, "grid.dt")?;
        if dt > t {
            return Err(config_err("grid.dt exceeds grid.t_max"));
        }
        Ok(())
    }

    fn resolve_initial(&mut self) -> Result<(), CliError> {
        let i = &mut self.initial;
        let given = [i.state.is_some(), i.psi.is_some(), i.rho.is_some()].iter().filter(|&&b| b).count();
        if given > 1 {
            return Err(config_err("[initial] takes one of 'state', 'psi' or 'rho'"));
        }
        if given == 0 {
            i.state = Some(match self.system.preset.as_deref() {
                Some("two_level") => "excited".into(),
                _ => "basis:0".into(),
            });
        }
        Ok(())
    }

    fn resolve_method_block(&mut self, method: Method) -> Result<(), CliError> {
        match method {
            Method::Lindblad => {
                let b = self.lindblad.get_or_insert_with(Default::default);
                let r = require(b.rate, method, "lindblad.rate")?;
                if !(r >= 0.0 && r.is_finite()) {
                    return Err(config_err("lindblad.rate must be non-negative"));
                }
            }
            Method::Tcl2 => {
                let b = self.tcl2.get_or_insert_with(Default::default);
                b.substeps.get_or_insert(2);
                b.budget.get_or_insert(200_000_000);
            }
            Method::Heom => {
                let b = self.heom.get_or_insert_with(Default::default);
                require(b.depth, method, "heom.depth")?;
                b.tol.get_or_insert(1e-3);
                b.n_exp.get_or_insert(4);
                b.max_ados.get_or_insert(200_000);
                let closure = b.closure.get_or_insert_with(|| "truncate".into());
                if closure != "truncate" && closure != "markovian" {
                    return Err(config_err(format!("heom.closure must be 'truncate' or 'markovian', got '{closure}'")));
                }
            }
            Method::HopsLinear | Method::HopsNonlinear => {
                let b = self.hops.get_or_insert_with(Default::default);
                require(b.k_max, method, "hops.k_max")?;
                nonzero(require(b.n_traj, method, "hops.n_traj")?, "hops.n_traj")?;
                b.fit_tol.get_or_insert(1e-3);
            }
            Method::Sln => {
                let b = self.sln.get_or_insert_with(Default::default);
                nonzero(require(b.n_traj, method, "sln.n_traj")?, "sln.n_traj")?;
                b.tol.get_or_insert(1e-6);
            }
            Method::Nmqj => {
                let b = self.nmqj.get_or_insert_with(Default::default);
                nonzero(require(b.n_traj, method, "nmqj.n_traj")?, "nmqj.n_traj")?;
            }
            Method::Chain => {
                let b = self.chain.get_or_insert_with(Default::default);
                nonzero(require(b.n_sites, method, "chain.n_sites")?, "chain.n_sites")?;
            }
            Method::Secular | Method::Niba | Method::ExactAmplitude | Method::ExactQbm | Method::Dephasing => {}
        }
        Ok(())
    }
}

fn nonzero(n: usize, field: &str) -> Result<(), CliError> {
    if n == 0 {
        Err(config_err(format!("{field} must be at least 1")))
    } else {
        Ok(())
    }
}

fn check_square(m: &MatrixSpec, field: &str) -> Result<(), CliError> {
    if m.is_empty() || m.iter().any(|row| row.len() != m.len()) {
        return Err(config_err(format!("{field} must be a non-empty square matrix of [re, im] pairs")));
    }
    Ok(())
}

fn resolve_bath(b: &mut BathConfig, base: Option<&Path>) -> Result<(), CliError> {
    let kind = b.kind.clone().ok_or_else(|| config_err("[bath] requires 'kind'"))?;
    let need = |v: Option<f64>, f: &str| v.ok_or_else(|| config_err(format!("bath kind '{kind}' requires '{f}'")));
    let allowed: &[&str] = match kind.as_str() {
        "ohmic" | "ohmic_hard" => {
            need(b.s, "s")?;
            need(b.eta, "eta")?;
            need(b.omega_c, "omega_c")?;
            &["s", "eta", "omega_c", "omega_max"]
        }
        "drude" => {
            need(b.lambda, "lambda")?;
            need(b.gamma, "gamma")?;
            &["lambda", "gamma", "omega_max"]
        }
        "lorentzian" => {
            need(b.weight, "weight")?;
            need(b.omega0, "omega0")?;
            need(b.width, "width")?;
            need(b.omega_max, "omega_max")?;
            &["weight", "omega0", "width", "omega_max"]
        }
        "tabulated" => {
            let f = b.file.clone().ok_or_else(|| config_err("bath kind 'tabulated' requires 'file'"))?;
            let p = PathBuf::from(&f);
            let p = match base {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p,
            };
            b.file = Some(p.to_string_lossy().into_owned());
            &["file"]
        }
        "exponential" => {
            need(b.g, "g")?;
            need(b.gamma, "gamma")?;
            b.omega0.get_or_insert(0.0);
            &["g", "gamma", "omega0"]
        }
        other => return Err(config_err(format!("unknown bath kind '{other}'"))),
    };
    let present = [
        ("s", b.s.is_some()),
        ("eta", b.eta.is_some()),
        ("omega_c", b.omega_c.is_some()),
        ("lambda", b.lambda.is_some()),
        ("gamma", b.gamma.is_some()),
        ("weight", b.weight.is_some()),
        ("omega0", b.omega0.is_some()),
        ("width", b.width.is_some()),
        ("omega_max", b.omega_max.is_some()),
        ("file", b.file.is_some()),
        ("g", b.g.is_some()),
    ];
    let stray: Vec<&str> = present.iter().filter(|(k, p)| *p && !allowed.contains(k)).map(|(k, _)| *k).collect();
    if !stray.is_empty() {
        return Err(config_err(format!("bath kind '{kind}' does not take: {}", stray.join(", "))));
    }
    let beta = *b.beta.get_or_insert(f64::INFINITY);
    if !(beta > 0.0) {
        return Err(config_err(format!("bath.beta must be positive, got {beta}")));
    }
    if kind == "exponential" && beta.is_finite() {
        return Err(config_err("bath kind 'exponential' describes a zero-temperature kernel; omit 'beta'"));
    }
    let stats = b.statistics.get_or_insert_with(|| "bosonic".into());
    if stats != "bosonic" && stats != "fermionic" {
        return Err(config_err(format!("bath.statistics must be 'bosonic' or 'fermionic', got '{stats}'")));
    }
    Ok(())
}

/// Deserializes `value` and reports every key the schema does not know.
fn from_value(value: toml::Value) -> Result<RunConfig, CliError> {
    let mut unknown = BTreeSet::new();
    let cfg: RunConfig = serde_ignored::deserialize(value, |path| {
        // Optional blocks show up as `?` segments.
        let key: Vec<String> = path.to_string().split('.').filter(|s| *s != "?").map(String::from).collect();
        unknown.insert(key.join("."));
    })
    .map_err(|e| config_err(e.to_string()))?;
    if !unknown.is_empty() {
        let keys: Vec<String> = unknown.into_iter().collect();
        return Err(config_err(format!("unknown keys: {}", keys.join(", "))));
    }
    Ok(cfg)
}

/// Parses TOML text. Metadata files written by a run are accepted too: their
/// `[config]` table holds the resolved configuration.
pub fn parse_value(text: &str) -> Result<toml::Table, CliError> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| config_err(format!("invalid TOML: {e}")))?;
    if let Some(toml::Value::Table(inner)) = table.get("config") {
        if table.contains_key("result") {
            table = inner.clone();
        }
    }
    Ok(table)
}

/// Validates a parsed table, resolving defaults. `base` anchors relative file paths.
pub fn config_from_table(table: toml::Table, base: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = from_value(toml::Value::Table(table))?;
    cfg.resolve(base)?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    config_from_table(parse_value(text)?, None)
}

/// Like [`parse_config`] with a seed override applied before validation.
pub fn parse_config_with(text: &str, base: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut table = parse_value(text)?;
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    config_from_table(table, base)
}

/// Sets a dotted numeric key, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: f64) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("sweep key '{key}': '{p}' is not a table")))?;
    }
    let last = parts[parts.len() - 1];
    let v = match cur.get(last) {
        Some(toml::Value::Integer(_)) if value.fract() == 0.0 => toml::Value::Integer(value as i64),
        _ => toml::Value::Float(value),
    };
    cur.insert(last.to_string(), v);
    Ok(())
}

/// Expands a sweep into one concrete table per value (without the `[sweep]` block).
pub fn expand_sweep(table: &toml::Table, cfg: &RunConfig) -> Result<Vec<toml::Table>, CliError> {
    let mut base = table.clone();
    base.remove("sweep");
    let Some(sw) = &cfg.sweep else {
        return Ok(vec![base]);
    };
    let key = sw.key.as_deref().expect("validated");
    let values = sw.values.as_deref().expect("validated");
    let name = cfg.output_name().to_string();
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut t = base.clone();
            set_dotted(&mut t, key, v)?;
            set_dotted_str(&mut t, "output.name", &format!("{name}_{i}"));
            Ok(t)
        })
        .collect()
}

fn set_dotted_str(table: &mut toml::Table, key: &str, value: &str) {
    let (head, last) = key.split_once('.').expect("two-part key");
    let entry = table.entry(head.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    if let Some(t) = entry.as_table_mut() {
        t.insert(last.to_string(), toml::Value::String(value.into()));
    }
}

/// The resolved configuration as TOML text.
pub fn echo(cfg: &RunConfig) -> Result<toml::Table, CliError> {
    let v = toml::Table::try_from(cfg).map_err(|e| CliError::Io(format!("serializing config: {e}")))?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
method = "lindblad"
[system]
preset = "two_level"
omega = 1.0
[coupling]
operator = "sigma_minus"
[grid]
t_max = 1.0
dt = 0.1
[lindblad]
rate = 0.05
"#;

    #[test]
    fn minimal_lindblad_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.method(), Method::Lindblad);
        assert_eq!(c.system.delta0, Some(0.0));
        assert_eq!(c.coupling.strength, Some(1.0));
        assert_eq!(c.initial.state.as_deref(), Some("excited"));
        assert_eq!(c.observables.as_deref(), Some(&["sigma_z".to_string()][..]));
        assert_eq!(c.output_name(), "run");
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let text = format!("{MINIMAL}\nfoo = 1\n[extra]\nx = 2\n").replace("omega = 1.0", "omega = 1.0\nomgea = 2.0");
        let err = parse_config(&text).unwrap_err().to_string();
        for k in ["foo", "extra", "system.omgea"] {
            assert!(err.contains(k), "{err}");
        }
    }

    #[test]
    fn heom_without_depth_names_field() {
        let text = MINIMAL.replace("method = \"lindblad\"", "method = \"heom\"")
            + "[bath]\nkind = \"drude\"\nlambda = 0.1\ngamma = 1.0\nbeta = 1.0\n";
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("depth"), "{err}");
    }

    #[test]
    fn stochastic_needs_seed() {
        let text = MINIMAL.replace("method = \"lindblad\"", "method = \"sln\"")
            + "[bath]\nkind = \"drude\"\nlambda = 0.1\ngamma = 1.0\nbeta = 1.0\n[sln]\nn_traj = 10\n";
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
        assert!(parse_config_with(&text, None, Some(3)).is_ok());
    }

    #[test]
    fn echo_round_trips() {
        let c = parse_config(MINIMAL).unwrap();
        let text = toml::to_string(&echo(&c).unwrap()).unwrap();
        assert_eq!(parse_config(&text).unwrap(), c);
    }

    #[test]
    fn sweep_expansion_sets_key_and_name() {
        let text = format!("{MINIMAL}[sweep]\nkey = \"coupling.strength\"\nvalues = [0.5, 2.0]\n");
        let table = parse_value(&text).unwrap();
        let cfg = config_from_table(table.clone(), None).unwrap();
        let points = expand_sweep(&table, &cfg).unwrap();
        assert_eq!(points.len(), 2);
        let p1 = config_from_table(points[1].clone(), None).unwrap();
        assert_eq!(p1.coupling.strength, Some(2.0));
        assert_eq!(p1.output_name(), "run_1");
        assert!(p1.sweep.is_none());
    }
}
