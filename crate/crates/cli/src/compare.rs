//! Comparison of two result CSV files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use oqsim::linalg::{trace_norm_hermitian, CMatrix};
use oqsim::C64;

use crate::error::CliError;

/// One observable's `re`, `im` and optional `stderr` columns.
#[derive(Clone, Debug, Default)]
struct Series {
    re: Vec<f64>,
    im: Vec<f64>,
    stderr: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ResultTable {
    pub times: Vec<f64>,
    series: BTreeMap<String, Series>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl ResultTable {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
        let headers = rdr.headers().map_err(|e| io_err(path, e))?.clone();
        if headers.get(0) != Some("t") {
            return Err(io_err(path, "first column must be 't'"));
        }
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
        for rec in rdr.records() {
            let rec = rec.map_err(|e| io_err(path, e))?;
            for (k, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|e| io_err(path, format!("'{field}': {e}")))?;
                cols[k].push(v);
            }
        }
        let mut series: BTreeMap<String, Series> = BTreeMap::new();
        for (k, h) in headers.iter().enumerate().skip(1) {
            let (name, part) = h.rsplit_once('_').ok_or_else(|| io_err(path, format!("bad column '{h}'")))?;
            let s = series.entry(name.to_string()).or_default();
            let data = std::mem::take(&mut cols[k]);
            match part {
                "re" => s.re = data,
                "im" => s.im = data,
                "stderr" => s.stderr = Some(data),
                _ => return Err(io_err(path, format!("bad column '{h}'"))),
            }
        }
        let times = std::mem::take(&mut cols[0]);
        for (name, s) in &series {
            if s.re.len() != times.len() || s.im.len() != times.len() {
                return Err(io_err(path, format!("observable '{name}' needs both _re and _im columns")));
            }
        }
        Ok(Self { times, series })
    }

    fn value(&self, name: &str, k: usize) -> C64 {
        let s = &self.series[name];
        C64::new(s.re[k], s.im[k])
    }

    fn stderr(&self, name: &str, k: usize) -> f64 {
        self.series[name].stderr.as_ref().map_or(0.0, |v| v[k])
    }

    /// Dimension of the exported density matrix, when every `rho_i_j` is present.
    fn rho_dim(&self) -> Option<usize> {
        let mut d = 0;
        while self.series.contains_key(&format!("rho_{d}_{d}")) {
            d += 1;
        }
        let full = (0..d).all(|i| (0..d).all(|j| self.series.contains_key(&format!("rho_{i}_{j}"))));
        (d > 0 && full).then_some(d)
    }

    /// Linear interpolation of every series onto `times`.
    fn resample(&self, times: &[f64]) -> Self {
        let n = self.times.len();
        let at = |v: &[f64], t: f64| -> f64 {
            let k = self.times.partition_point(|&x| x <= t).clamp(1, n - 1);
            let (t0, t1) = (self.times[k - 1], self.times[k]);
            let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            v[k - 1] * (1.0 - f) + v[k] * f
        };
        let series = self
            .series
            .iter()
            .map(|(name, s)| {
                let map = |v: &Vec<f64>| times.iter().map(|&t| at(v, t)).collect::<Vec<_>>();
                (
                    name.clone(),
                    Series {
                        re: map(&s.re),
                        im: map(&s.im),
                        stderr: s.stderr.as_ref().map(map),
                    },
                )
            })
            .collect();
        Self {
            times: times.to_vec(),
            series,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CompareOptions {
    pub tol: f64,
    /// Adds `k·√(σ_A² + σ_B²)` to the tolerance row by row.
    pub stderr_factor: f64,
    /// Resample B onto A's grid when the grids differ.
    pub interpolate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub name: String,
    pub max_diff: f64,
    /// Largest `diff − threshold`; non-positive means within tolerance.
    pub worst_excess: f64,
}

impl Line {
    pub fn pass(&self) -> bool {
        self.worst_excess <= 0.0
    }
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub lines: Vec<Line>,
    pub trace_distance: Option<Vec<f64>>,
    pub skipped: Vec<String>,
}

impl CompareReport {
    pub fn pass(&self) -> bool {
        self.lines.iter().all(Line::pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            let verdict = if l.pass() { "PASS" } else { "FAIL" };
            writeln!(out, "{verdict} {} max_abs_diff={:e} worst_excess={:e}", l.name, l.max_diff, l.worst_excess).unwrap();
        }
        for s in &self.skipped {
            writeln!(out, "SKIP {s} (present in one file only)").unwrap();
        }
        writeln!(out, "{}", if self.pass() { "overall PASS" } else { "overall FAIL" }).unwrap();
        out
    }
}

fn aligned(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * x.abs().max(1.0))
}

pub fn compare_tables(a: &ResultTable, b: &ResultTable, opts: CompareOptions) -> Result<CompareReport, CliError> {
    let resampled;
    let b = if aligned(&a.times, &b.times) {
        b
    } else if opts.interpolate {
        let (lo, hi) = (b.times[0], *b.times.last().unwrap());
        if a.times.iter().any(|&t| t < lo - 1e-12 || t > hi + 1e-12) {
            return Err(CliError::Config("the first file's grid extends beyond the second's".into()));
        }
        resampled = b.resample(&a.times);
        &resampled
    } else {
        return Err(CliError::Config(
            "time grids differ; pass --interpolate to resample the second file".into(),
        ));
    };
    let mut lines = Vec::new();
    let mut skipped = Vec::new();
    for name in a.series.keys().chain(b.series.keys()) {
        let both = a.series.contains_key(name) && b.series.contains_key(name);
        if !both {
            if !skipped.contains(name) {
                skipped.push(name.clone());
            }
            continue;
        }
        if lines.iter().any(|l: &Line| &l.name == name) {
            continue;
        }
        let mut max_diff = 0.0f64;
        let mut worst = f64::NEG_INFINITY;
        for k in 0..a.times.len() {
            let d = (a.value(name, k) - b.value(name, k)).norm();
            let se = a.stderr(name, k).hypot(b.stderr(name, k));
            max_diff = max_diff.max(d);
            worst = worst.max(d - opts.tol - opts.stderr_factor * se);
        }
        lines.push(Line {
            name: name.clone(),
            max_diff,
            worst_excess: worst,
        });
    }
    if lines.is_empty() {
        return Err(CliError::Config("the files share no observable".into()));
    }
    let mut trace_distance = None;
    if let (Some(da), Some(db)) = (a.rho_dim(), b.rho_dim()) {
        if da == db {
            let d = da;
            let mut td = Vec::with_capacity(a.times.len());
            let mut worst = f64::NEG_INFINITY;
            for k in 0..a.times.len() {
                let diff = CMatrix::from_fn(d, d, |i, j| {
                    let name = format!("rho_{i}_{j}");
                    a.value(&name, k) - b.value(&name, k)
                });
                let herm = (&diff + diff.adjoint()) * C64::new(0.5, 0.0);
                let dist = 0.5 * trace_norm_hermitian(&herm);
                let se = a.stderr("rho_0_0", k).hypot(b.stderr("rho_0_0", k)) * std::f64::consts::FRAC_1_SQRT_2;
                worst = worst.max(dist - opts.tol - opts.stderr_factor * se);
                td.push(dist);
            }
            lines.push(Line {
                name: "trace_distance".into(),
                max_diff: td.iter().cloned().fold(0.0, f64::max),
                worst_excess: worst,
            });
            trace_distance = Some(td);
        }
    }
    Ok(CompareReport {
        lines,
        trace_distance,
        skipped,
    })
}

pub fn compare(a: &Path, b: &Path, opts: CompareOptions) -> Result<CompareReport, CliError> {
    compare_tables(&ResultTable::read(a)?, &ResultTable::read(b)?, opts)
}
