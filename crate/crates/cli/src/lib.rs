//! Batch front-end for the `oqsim` solvers: configuration parsing, solver
//! dispatch, seeded parallel ensembles and sweeps, and result files.

pub mod compare;
pub mod config;
pub mod error;
pub mod model;
pub mod run;

use std::path::{Path, PathBuf};

use oqsim::nonmarkov::{
    blp_measure, blp_measure_pairs, build_map, canonical_rates, measures_csv, rhp_measure, BlpResult, CanonicalRates,
    DynamicalMap, RhpResult,
};
use oqsim::{DensityMatrix, Error};
use rayon::prelude::*;

pub use config::{parse_config, Method, RunConfig};
pub use error::{exit, CliError};
pub use run::{run, RunResult};

/// Options shared by every subcommand.
#[derive(Clone, Debug)]
pub struct Global {
    pub workers: usize,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

/// Runs `f` on a pool of `workers` threads.
pub fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Io(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Reads a configuration or metadata file, applying a seed override.
pub fn load(path: &Path, seed: Option<u64>) -> Result<(toml::Table, RunConfig), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut table = config::parse_value(&text)?;
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    let cfg = config::config_from_table(table.clone(), path.parent())?;
    // Relative paths are resolved once so that sweep points and echoes carry absolute ones.
    let mut resolved = table;
    if let Some(file) = cfg.bath.as_ref().and_then(|b| b.file.clone()) {
        if let Some(toml::Value::Table(b)) = resolved.get_mut("bath") {
            b.insert("file".into(), file.into());
        }
    }
    Ok((resolved, cfg))
}

/// Runs every sweep point of a parsed configuration table, in parallel.
pub fn run_table(table: &toml::Table, base: Option<&Path>, workers: usize) -> Result<Vec<RunResult>, CliError> {
    let cfg = config::config_from_table(table.clone(), base)?;
    let configs = config::expand_sweep(table, &cfg)?
        .into_iter()
        .map(|t| config::config_from_table(t, base))
        .collect::<Result<Vec<_>, _>>()?;
    with_pool(workers, || configs.par_iter().map(run).collect::<Vec<_>>())?
        .into_iter()
        .collect()
}

/// `simulate`: one run, or one run per sweep value (in parallel).
pub fn simulate(path: &Path, g: &Global) -> Result<Vec<PathBuf>, CliError> {
    let (table, _) = load(path, g.seed)?;
    let results = run_table(&table, path.parent(), g.workers)?;
    std::fs::create_dir_all(&g.out)?;
    let mut written = Vec::new();
    for r in results {
        written.extend(r.write(&g.out)?);
    }
    Ok(written)
}

/// `chain`: recurrence coefficients, Gauss nodes and chain constants as CSV.
pub fn chain(path: &Path, g: &Global) -> Result<PathBuf, CliError> {
    let (_, cfg) = load(path, g.seed)?;
    let n = cfg
        .chain
        .as_ref()
        .and_then(|b| b.n_sites)
        .ok_or_else(|| CliError::Config("the chain dump requires field 'chain.n_sites'".into()))?;
    let kernel = model::Kernel::from_config(&cfg)?;
    let bath = kernel.bath("chain")?;
    let coeffs = oqsim::chain::recurrence_coefficients(&bath.j, n).map_err(CliError::solver("chain"))?;
    let star = oqsim::chain::gauss_discretize(&coeffs).map_err(CliError::solver("chain"))?;
    std::fs::create_dir_all(&g.out)?;
    let out = g.out.join(format!("{}_chain.csv", cfg.output_name()));
    std::fs::write(&out, oqsim::chain::chain_csv(&coeffs, &star))?;
    Ok(out)
}

fn as_core_error(e: CliError) -> Error {
    match e {
        CliError::Solver { source, .. } => source,
        other => Error::Domain(other.to_string()),
    }
}

/// Dynamical map of a configuration and the quantities derived from it.
pub struct Measures {
    pub map: DynamicalMap,
    pub blp: BlpResult,
    pub rhp: RhpResult,
    pub rates: CanonicalRates,
}

pub fn compute_measures(cfg: &RunConfig, workers: usize) -> Result<Measures, CliError> {
    let method = cfg.method();
    if matches!(method, Method::HopsLinear | Method::HopsNonlinear | Method::Nmqj | Method::Niba) {
        return Err(CliError::Config(format!(
            "method '{}' cannot build a dynamical map; use a density-matrix method",
            method.name()
        )));
    }
    let d = cfg.dim();
    let directions = cfg.measure.as_ref().and_then(|m| m.directions).unwrap_or(200);
    let ctx = CliError::solver("measure");
    with_pool(workers, || -> Result<_, CliError> {
        let map = build_map(d, |rho| {
            let mut info = toml::Table::new();
            let ev = run::evolve(cfg, Some(rho), &mut info).map_err(as_core_error)?;
            Ok(oqsim::linalg::Trajectory::new(ev.times, ev.states))
        })
        .map_err(CliError::solver("measure"))?;
        let blp = if d == 2 {
            blp_measure(&map, directions)
        } else {
            let pairs: Vec<(DensityMatrix, DensityMatrix)> = (0..d)
                .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
                .map(|(i, j)| Ok((DensityMatrix::basis(d, i)?, DensityMatrix::basis(d, j)?)))
                .collect::<oqsim::Result<_>>()
                .map_err(CliError::solver("measure"))?;
            blp_measure_pairs(&map, &pairs)
        }
        .map_err(CliError::solver("measure: trace-distance measure"))?;
        let rhp = rhp_measure(&map).map_err(CliError::solver("measure: divisibility measure"))?;
        let rates = canonical_rates(&map).map_err(CliError::solver("measure: canonical rates"))?;
        Ok(Measures { map, blp, rhp, rates })
    })?
    .map_err(|e| match e {
        CliError::Solver { .. } => e,
        other => ctx(as_core_error(other)),
    })
}

/// `measure`: dynamical map, trace-distance and divisibility measures, and
/// canonical rates.
pub fn measure(path: &Path, g: &Global) -> Result<Vec<PathBuf>, CliError> {
    let (_, cfg) = load(path, g.seed)?;
    let Measures { map, blp, rhp, rates } = compute_measures(&cfg, g.workers)?;
    std::fs::create_dir_all(&g.out)?;
    let name = cfg.output_name();
    let csv = g.out.join(format!("{name}_measures.csv"));
    std::fs::write(&csv, measures_csv(&map.times, &blp.distance, &rhp.g, &rates))?;
    let mut result = toml::Table::new();
    result.insert("blp".into(), blp.value.into());
    if let Some(dir) = blp.direction {
        result.insert("blp_direction".into(), toml::Value::Array(dir.iter().map(|&x| x.into()).collect()));
    }
    result.insert("blp_noisy".into(), blp.noisy.into());
    result.insert("rhp".into(), rhp.value.into());
    result.insert("max_trace_error".into(), map.max_trace_error().into());
    result.insert("hermiticity_residual".into(), rates.hermiticity_residual.into());
    let mut t = toml::Table::new();
    t.insert("result".into(), result.into());
    t.insert("config".into(), config::echo(&cfg)?.into());
    let meta = g.out.join(format!("{name}_measures.toml"));
    std::fs::write(&meta, toml::to_string(&t).map_err(|e| CliError::Io(e.to_string()))?)?;
    Ok(vec![csv, meta])
}
