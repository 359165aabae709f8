//! Bath models: spectral densities, correlation functions, exponential-sum
//! expansions and Gaussian noise synthesis.
//!
//! Conventions: `α⁻(t) = ∫J(ω)(n(ω)+1)e^{−iωt}dω`, `α⁺(t) = ∫J(ω)n(ω)e^{iωt}dω`
//! and the total kernel `α_T = α⁻ + α⁺`. Zero temperature is `β = ∞`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::linalg::{c, re, CMatrix, CVector, TimeGrid, C64, I, ZERO};
use crate::quad;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutoffShape {
    Exponential,
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpectralKind {
    /// `η ω^s ω_c^{1−s}` with an exponential or hard cutoff at `ω_c`.
    OhmicFamily {
        s: f64,
        eta: f64,
        omega_c: f64,
        cutoff: CutoffShape,
    },
    /// `λγ²ω / (2π(ω² + γ²))`.
    Drude { lambda: f64, gamma: f64 },
    /// `(w/π) Γ / ((ω − ω₀)² + Γ²)` restricted to a finite support.
    Lorentzian { weight: f64, omega0: f64, width: f64 },
    /// Linear interpolation between samples, zero outside.
    Tabulated { omega: Vec<f64>, j: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDensity {
    pub kind: SpectralKind,
    /// Upper support bound; `None` means the natural support of the kind.
    pub omega_max: Option<f64>,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive and finite, got {v}")))
    }
}

impl SpectralDensity {
    pub fn new(kind: SpectralKind, omega_max: Option<f64>) -> Result<Self> {
        match &kind {
            SpectralKind::OhmicFamily { s, eta, omega_c, .. } => {
                positive("s", *s)?;
                positive("omega_c", *omega_c)?;
                if !(*eta >= 0.0 && eta.is_finite()) {
                    return Err(Error::Domain(format!("eta must be >= 0, got {eta}")));
                }
            }
            SpectralKind::Drude { lambda, gamma } => {
                positive("gamma", *gamma)?;
                if !(*lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::Domain(format!("lambda must be >= 0, got {lambda}")));
                }
            }
            SpectralKind::Lorentzian { weight, omega0, width } => {
                positive("width", *width)?;
                if !(*weight >= 0.0) || !omega0.is_finite() {
                    return Err(Error::Domain("Lorentzian weight must be >= 0".into()));
                }
                if omega_max.is_none() {
                    return Err(Error::Domain("Lorentzian density needs omega_max".into()));
                }
            }
            SpectralKind::Tabulated { omega, j } => {
                if omega.len() != j.len() || omega.len() < 2 {
                    return Err(Error::Domain(
                        "tabulated density needs at least two (omega, J) pairs".into(),
                    ));
                }
                if omega[0] < 0.0 || omega.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::Domain(
                        "tabulated frequencies must be nonnegative and strictly increasing".into(),
                    ));
                }
                if j.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                    return Err(Error::Domain("tabulated J must be finite and >= 0".into()));
                }
            }
        }
        if let Some(w) = omega_max {
            positive("omega_max", w)?;
        }
        Ok(Self { kind, omega_max })
    }

    pub fn ohmic(s: f64, eta: f64, omega_c: f64) -> Result<Self> {
        Self::new(
            SpectralKind::OhmicFamily {
                s,
                eta,
                omega_c,
                cutoff: CutoffShape::Exponential,
            },
            None,
        )
    }

    pub fn ohmic_hard(s: f64, eta: f64, omega_c: f64) -> Result<Self> {
        Self::new(
            SpectralKind::OhmicFamily {
                s,
                eta,
                omega_c,
                cutoff: CutoffShape::Hard,
            },
            None,
        )
    }

    pub fn drude(lambda: f64, gamma: f64) -> Result<Self> {
        Self::new(SpectralKind::Drude { lambda, gamma }, None)
    }

    pub fn lorentzian(weight: f64, omega0: f64, width: f64, omega_max: f64) -> Result<Self> {
        Self::new(
            SpectralKind::Lorentzian {
                weight,
                omega0,
                width,
            },
            Some(omega_max),
        )
    }

    pub fn tabulated(omega: Vec<f64>, j: Vec<f64>) -> Result<Self> {
        Self::new(SpectralKind::Tabulated { omega, j }, None)
    }

    /// Parses two whitespace- or comma-separated columns `ω J`; `#` starts a comment.
    pub fn from_table_text(text: &str) -> Result<Self> {
        let mut omega = Vec::new();
        let mut j = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line
                .split(|ch: char| ch.is_whitespace() || ch == ',')
                .filter(|s| !s.is_empty())
                .collect();
            if cols.len() != 2 {
                return Err(Error::Domain(format!(
                    "line {}: expected two columns, found {}",
                    lineno + 1,
                    cols.len()
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Domain(format!("line {}: {e}", lineno + 1)))
            };
            omega.push(parse(cols[0])?);
            j.push(parse(cols[1])?);
        }
        Self::tabulated(omega, j)
    }

    /// Upper end of the support (may be infinite).
    pub fn support_max(&self) -> f64 {
        let natural = match &self.kind {
            SpectralKind::OhmicFamily {
                omega_c,
                cutoff: CutoffShape::Hard,
                ..
            } => *omega_c,
            SpectralKind::Tabulated { omega, .. } => *omega.last().unwrap(),
            _ => f64::INFINITY,
        };
        match self.omega_max {
            Some(w) => w.min(natural),
            None => natural,
        }
    }

    /// Finite integration limit beyond which `J` is negligible (relative 1e-20).
    pub fn quadrature_max(&self) -> f64 {
        let sup = self.support_max();
        if sup.is_finite() {
            return sup;
        }
        match &self.kind {
            SpectralKind::OhmicFamily { s, omega_c, .. } => omega_c * (50.0 + 4.0 * s),
            SpectralKind::Drude { gamma, .. } => 1e6 * gamma,
            _ => sup,
        }
    }

    /// Panel width that resolves the structure of `J`.
    pub fn feature_width(&self) -> f64 {
        match &self.kind {
            SpectralKind::OhmicFamily { omega_c, .. } => 0.25 * omega_c,
            SpectralKind::Drude { gamma, .. } => 0.25 * gamma,
            SpectralKind::Lorentzian { width, .. } => 0.5 * width,
            SpectralKind::Tabulated { omega, .. } => omega[omega.len() - 1] - omega[0],
        }
    }

    fn j_unchecked(&self, w: f64) -> f64 {
        if w > self.support_max() {
            return 0.0;
        }
        match &self.kind {
            SpectralKind::OhmicFamily {
                s,
                eta,
                omega_c,
                cutoff,
            } => {
                if w == 0.0 {
                    return 0.0;
                }
                let base = eta * w.powf(*s) * omega_c.powf(1.0 - s);
                match cutoff {
                    CutoffShape::Exponential => base * (-w / omega_c).exp(),
                    CutoffShape::Hard => base,
                }
            }
            SpectralKind::Drude { lambda, gamma } => {
                lambda * gamma * gamma * w / (2.0 * PI * (w * w + gamma * gamma))
            }
            SpectralKind::Lorentzian {
                weight,
                omega0,
                width,
            } => weight / PI * width / ((w - omega0).powi(2) + width * width),
            SpectralKind::Tabulated { omega, j } => {
                if w < omega[0] || w > omega[omega.len() - 1] {
                    return 0.0;
                }
                let k = omega.partition_point(|&x| x <= w).saturating_sub(1);
                let k = k.min(omega.len() - 2);
                let s = (w - omega[k]) / (omega[k + 1] - omega[k]);
                j[k] * (1.0 - s) + j[k + 1] * s
            }
        }
    }

    pub fn eval(&self, w: f64) -> Result<f64> {
        if !(w >= 0.0) {
            return Err(Error::Domain(format!("J(omega) needs omega >= 0, got {w}")));
        }
        Ok(self.j_unchecked(w))
    }

    fn tabulated_samples(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        if let SpectralKind::Tabulated { omega, j } = &self.kind {
            let top = self.support_max();
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (&x, &y) in omega.iter().zip(j.iter()) {
                if x <= top {
                    xs.push(x);
                    ys.push(y);
                }
            }
            if top < *omega.last().unwrap() {
                xs.push(top);
                ys.push(self.j_unchecked(top));
            }
            Some((xs, ys))
        } else {
            None
        }
    }

    fn is_open_drude(&self) -> bool {
        matches!(self.kind, SpectralKind::Drude { .. }) && !self.support_max().is_finite()
    }

    /// `∫ f(ω) J(ω) dω` over the support.
    pub fn integrate_weighted<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        if self.is_open_drude() {
            return Err(Error::Domain(
                "Drude density has a 1/omega tail; set omega_max for weighted integrals".into(),
            ));
        }
        if let Some((xs, ys)) = self.tabulated_samples() {
            // Exact for linear f J on each segment is not available; subdivide segments.
            let mut total = 0.0;
            for k in 0..xs.len() - 1 {
                let g = |w: f64| {
                    let s = (w - xs[k]) / (xs[k + 1] - xs[k]);
                    f(w) * (ys[k] * (1.0 - s) + ys[k + 1] * s)
                };
                total += quad::rule16().integrate(g, xs[k], xs[k + 1]);
            }
            return Ok(total);
        }
        let top = self.quadrature_max();
        let (v, res) = quad::real_integral(
            |w| f(w) * self.j_unchecked(w),
            0.0,
            top,
            self.feature_width(),
            true,
        );
        if res > 1e-9 * v.abs().max(1e-300) && res > 1e-14 {
            return Err(Error::Quadrature {
                residual: res,
                context: "weighted spectral integral".into(),
            });
        }
        Ok(v)
    }

    /// `∫₀^top f(ω) J(ω) dω` on panels no wider than `max_width`, with the
    /// quadrature residual. Tabulated densities are integrated segment by segment.
    pub fn integrate_weighted_with<F: Fn(f64) -> f64>(&self, f: F, max_width: f64, top: f64) -> (f64, f64) {
        let top = top.min(self.support_max());
        if let Some((xs, ys)) = self.tabulated_samples() {
            let mut total = 0.0;
            let mut res = 0.0;
            for k in 0..xs.len() - 1 {
                let (a, b) = (xs[k], xs[k + 1].min(top));
                if a >= b {
                    break;
                }
                let g = |w: f64| {
                    let s = (w - xs[k]) / (xs[k + 1] - xs[k]);
                    f(w) * (ys[k] * (1.0 - s) + ys[k + 1] * s)
                };
                let (v, r) = quad::real_integral(g, a, b, max_width, false);
                total += v;
                res += r;
            }
            return (total, res);
        }
        let width = max_width.min(self.feature_width());
        quad::real_integral(|w| f(w) * self.j_unchecked(w), 0.0, top, width, true)
    }

    /// `∫ J(ω) dω`.
    pub fn integral(&self) -> Result<f64> {
        self.integrate_weighted(|_| 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Statistics {
    Bosonic,
    Fermionic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BathSpec {
    pub j: SpectralDensity,
    pub beta: f64,
    pub statistics: Statistics,
}

impl BathSpec {
    pub fn new(j: SpectralDensity, beta: f64, statistics: Statistics) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::Domain(format!("beta must be > 0 or infinite, got {beta}")));
        }
        Ok(Self { j, beta, statistics })
    }

    pub fn bosonic(j: SpectralDensity, beta: f64) -> Result<Self> {
        Self::new(j, beta, Statistics::Bosonic)
    }

    pub fn zero_temperature(j: SpectralDensity) -> Self {
        Self {
            j,
            beta: f64::INFINITY,
            statistics: Statistics::Bosonic,
        }
    }

    pub fn is_zero_temperature(&self) -> bool {
        self.beta.is_infinite()
    }

    /// Thermal occupation; `1/(e^{βω} ∓ 1)` for bosons/fermions.
    pub fn occupation(&self, w: f64) -> f64 {
        if self.is_zero_temperature() {
            return 0.0;
        }
        match self.statistics {
            Statistics::Bosonic => 1.0 / (self.beta * w).exp_m1(),
            Statistics::Fermionic => 1.0 / ((self.beta * w).exp() + 1.0),
        }
    }

    pub fn require_bosonic(&self) -> Result<()> {
        match self.statistics {
            Statistics::Bosonic => Ok(()),
            Statistics::Fermionic => Err(Error::Unsupported(
                "fermionic baths are stored but no solver consumes them".into(),
            )),
        }
    }

    /// `∫ J n e^{−iωt} dω`, the thermal part shared by `α⁻` and `α⁺`.
    fn thermal_part(&self, t: f64) -> Result<C64> {
        if self.is_zero_temperature() {
            return Ok(ZERO);
        }
        let beta = self.beta;
        let jn = |w: f64| {
            if w == 0.0 {
                // J(ω) n(ω) → J'(0)/β; evaluated just off zero instead.
                let e = 1e-12 * self.j.feature_width();
                return self.j.j_unchecked(e) / (beta * e).exp_m1();
            }
            self.j.j_unchecked(w) / (beta * w).exp_m1()
        };
        if let Some((xs, _)) = self.j.tabulated_samples() {
            let mut acc = ZERO;
            let mut res = 0.0;
            for k in 0..xs.len() - 1 {
                let (v, r) = quad::fourier_integral(jn, t, xs[k], xs[k + 1], f64::INFINITY, k == 0);
                acc += v;
                res += r;
            }
            return check_quad(acc, res, "thermal correlation (tabulated)");
        }
        let top = self.j.quadrature_max().min(80.0 / beta + self.j.feature_width());
        let width = self.j.feature_width().min(1.0 / beta);
        let (v, res) = quad::fourier_integral(jn, t, 0.0, top, width, true);
        check_quad(v, res, "thermal correlation")
    }

    /// `(α⁻(t), α⁺(t))`.
    pub fn correlation_pair(&self, t: f64) -> Result<(C64, C64)> {
        self.require_bosonic()?;
        let z = correlation_zero_t(&self.j, t)?;
        let n = self.thermal_part(t)?;
        Ok((z + n, n.conj()))
    }

    pub fn correlation_thermal(&self, t: f64) -> Result<C64> {
        let (a, b) = self.correlation_pair(t)?;
        Ok(a + b)
    }
}

fn check_quad(v: C64, res: f64, context: &str) -> Result<C64> {
    let scale = v.norm().max(1e-300);
    if res > 1e-8 * scale && res > 1e-13 {
        return Err(Error::Quadrature {
            residual: res,
            context: context.into(),
        });
    }
    Ok(v)
}

/// `α(t) = ∫₀^∞ J(ω) e^{−iωt} dω`.
pub fn correlation_zero_t(j: &SpectralDensity, t: f64) -> Result<C64> {
    if !t.is_finite() {
        return Err(Error::Domain(format!("time must be finite, got {t}")));
    }
    if t < 0.0 {
        return correlation_zero_t(j, -t).map(|z| z.conj());
    }
    if let SpectralKind::Drude { lambda, gamma } = j.kind {
        if j.is_open_drude() {
            if t == 0.0 {
                return Err(Error::Domain(
                    "Drude correlation diverges logarithmically at t = 0".into(),
                ));
            }
            let pref = lambda * gamma * gamma / (2.0 * PI);
            let real = pref * quad::drude_cosine_integral(gamma, t);
            let imag = -lambda * gamma * gamma / 4.0 * (-gamma * t).exp();
            return Ok(c(real, imag));
        }
    }
    if let Some((xs, ys)) = j.tabulated_samples() {
        return Ok(quad::filon_linear(&xs, &ys, t));
    }
    let top = j.quadrature_max();
    let (v, res) = quad::fourier_integral(|w| j.j_unchecked(w), t, 0.0, top, j.feature_width(), true);
    check_quad(v, res, "zero-temperature correlation")
}

/// Anything that can supply the `(α⁻, α⁺)` kernel pair at `t ≥ 0`.
pub trait Correlation: Send + Sync {
    fn pair(&self, t: f64) -> Result<(C64, C64)>;

    fn total(&self, t: f64) -> Result<C64> {
        let (a, b) = self.pair(t)?;
        Ok(a + b)
    }
}

impl Correlation for BathSpec {
    fn pair(&self, t: f64) -> Result<(C64, C64)> {
        self.correlation_pair(t)
    }
}

/// A single kernel used as `α⁻` with `α⁺ = 0`. For Hermitian couplings only
/// the sum `α⁻ + α⁺` enters, so a total thermal kernel can be passed this way.
impl Correlation for CorrelationSum {
    fn pair(&self, t: f64) -> Result<(C64, C64)> {
        Ok((self.eval(t), ZERO))
    }
}

/// Explicit thermal pair of exponential sums.
#[derive(Clone, Debug, PartialEq)]
pub struct ThermalPair {
    pub minus: CorrelationSum,
    pub plus: CorrelationSum,
}

impl Correlation for ThermalPair {
    fn pair(&self, t: f64) -> Result<(C64, C64)> {
        Ok((self.minus.eval(t), self.plus.eval(t)))
    }
}

impl<T: Correlation + ?Sized> Correlation for Arc<T> {
    fn pair(&self, t: f64) -> Result<(C64, C64)> {
        (**self).pair(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpTerm {
    pub c: C64,
    pub mu: C64,
}

/// `α(t) = Σ c_m e^{−μ_m t}` for `t ≥ 0`, extended by `α(−t) = α(t)*`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationSum {
    terms: Vec<ExpTerm>,
}

impl CorrelationSum {
    pub fn new(terms: Vec<ExpTerm>) -> Result<Self> {
        for (k, t) in terms.iter().enumerate() {
            if !(t.mu.re > 0.0) {
                return Err(Error::Domain(format!(
                    "term {k}: decay rate must have positive real part, got {}",
                    t.mu
                )));
            }
            if !(t.c.re.is_finite() && t.c.im.is_finite() && t.mu.im.is_finite()) {
                return Err(Error::Domain(format!("term {k} is not finite")));
            }
        }
        let s: C64 = terms.iter().map(|t| t.c).sum();
        if s.re < -1e-12 * terms.iter().map(|t| t.c.norm()).sum::<f64>() {
            return Err(Error::Domain(format!(
                "alpha(0) = {s} has negative real part"
            )));
        }
        Ok(Self { terms })
    }

    /// `g e^{−γt}`.
    pub fn single(g: C64, gamma: C64) -> Result<Self> {
        Self::new(vec![ExpTerm { c: g, mu: gamma }])
    }

    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn terms(&self) -> &[ExpTerm] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn eval(&self, t: f64) -> C64 {
        if t < 0.0 {
            return self.eval(-t).conj();
        }
        self.terms.iter().map(|x| x.c * (-x.mu * t).exp()).sum()
    }

    pub fn at_zero(&self) -> C64 {
        self.terms.iter().map(|x| x.c).sum()
    }

    /// `∫₀^∞ α(t) dt = Σ c/μ`.
    pub fn integral(&self) -> C64 {
        self.terms.iter().map(|x| x.c / x.mu).sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|x| ExpTerm { c: x.c * s, mu: x.mu })
                .collect(),
        }
    }

    /// For each term, the index of the term with the conjugate decay rate.
    pub fn conjugate_partners(&self) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.terms.len());
        for (k, t) in self.terms.iter().enumerate() {
            let target = t.mu.conj();
            let scale = t.mu.norm().max(1e-300);
            let found = self
                .terms
                .iter()
                .position(|u| (u.mu - target).norm() <= 1e-10 * scale)
                .ok_or_else(|| {
                    Error::Domain(format!(
                        "term {k} (mu = {}) has no partner with the conjugate rate",
                        t.mu
                    ))
                })?;
            out.push(found);
        }
        Ok(out)
    }
}

/// Drude Matsubara expansion with `m_max` Matsubara terms beyond the `μ₀ = γ` term.
pub fn matsubara_expansion(bath: &BathSpec, m_max: usize) -> Result<CorrelationSum> {
    bath.require_bosonic()?;
    let (lambda, gamma) = match bath.j.kind {
        SpectralKind::Drude { lambda, gamma } => (lambda, gamma),
        _ => {
            return Err(Error::Domain(
                "Matsubara expansion requires a Drude spectral density".into(),
            ))
        }
    };
    if bath.j.support_max().is_finite() {
        return Err(Error::Domain(
            "Matsubara expansion assumes the untruncated Drude density".into(),
        ));
    }
    if bath.is_zero_temperature() {
        return Err(Error::Domain(
            "Matsubara expansion requires finite temperature".into(),
        ));
    }
    let beta = bath.beta;
    let g2l = gamma * gamma * lambda;
    let half = 0.5 * beta * gamma;
    let mut terms = vec![ExpTerm {
        c: c(g2l / 4.0 / half.tan(), -g2l / 4.0),
        mu: re(gamma),
    }];
    for m in 1..=m_max {
        let mu = 2.0 * PI * m as f64 / beta;
        if (mu - gamma).abs() <= 1e-10 * gamma {
            return Err(Error::DegeneratePole { m });
        }
        terms.push(ExpTerm {
            c: re(g2l / beta * mu / (mu * mu - gamma * gamma)),
            mu: re(mu),
        });
    }
    Ok(CorrelationSum { terms })
}

/// Reference samples of the thermal Drude kernel used by the convergence loop.
pub struct MatsubaraCheck {
    pub times: Vec<f64>,
    pub reference: Vec<C64>,
}

impl MatsubaraCheck {
    /// Samples `α_T` by quadrature on `n` points of `[t_min, t_max]`.
    pub fn new(bath: &BathSpec, t_min: f64, t_max: f64, n: usize) -> Result<Self> {
        let times: Vec<f64> = (0..n)
            .map(|k| t_min + (t_max - t_min) * k as f64 / (n - 1).max(1) as f64)
            .collect();
        let reference = times
            .iter()
            .map(|&t| bath.correlation_thermal(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { times, reference })
    }

    pub fn residual(&self, sum: &CorrelationSum) -> f64 {
        self.times
            .iter()
            .zip(self.reference.iter())
            .map(|(&t, r)| (sum.eval(t) - r).norm())
            .fold(0.0, f64::max)
    }
}

/// Smallest `m_max` (in steps of 4) whose residual against quadrature is below
/// `tol·|c₀|` on `[t_min, t_max]`.
pub fn matsubara_converged(
    bath: &BathSpec,
    tol: f64,
    t_min: f64,
    t_max: f64,
) -> Result<(CorrelationSum, usize, f64)> {
    let check = MatsubaraCheck::new(bath, t_min, t_max, 60)?;
    let scale = matsubara_expansion(bath, 0)?.terms[0].c.norm();
    let mut m = 0;
    loop {
        let sum = matsubara_expansion(bath, m)?;
        let r = check.residual(&sum);
        if r <= tol * scale {
            return Ok((sum, m, r));
        }
        if m >= 4000 {
            return Err(Error::Numerical(format!(
                "Matsubara expansion did not converge: residual {r:e} at m_max = {m}"
            )));
        }
        m += 4;
    }
}

/// Least-squares exponential-sum fit to uniformly spaced samples.
///
/// Initialized by the matrix-pencil method and refined by Levenberg-Marquardt
/// with `Re μ = e^p` so decay rates stay positive.
pub fn fit_correlation(
    dt: f64,
    samples: &[C64],
    n_exp: usize,
    tol: f64,
) -> Result<(CorrelationSum, f64)> {
    if n_exp == 0 {
        return Err(Error::Domain("n_exp must be >= 1".into()));
    }
    if samples.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Domain("samples must be finite".into()));
    }
    if samples.len() < 2 * n_exp + 2 {
        return Err(Error::Domain(format!(
            "need at least {} samples for {n_exp} exponentials",
            2 * n_exp + 2
        )));
    }
    let init = matrix_pencil(dt, samples, n_exp)?;
    let mut weights = vec![1.0; samples.len()];
    let (mut fit, mut resid) = levenberg_marquardt(dt, samples, &weights, init);
    // Lawson-style reweighting pushes the least-squares fit towards minimax.
    let mut current = fit.clone();
    for _ in 0..25 {
        if resid <= 0.25 * tol {
            break;
        }
        let errs: Vec<f64> = samples
            .iter()
            .enumerate()
            .map(|(k, y)| {
                let t = k as f64 * dt;
                (current.iter().map(|x| x.c * (-x.mu * t).exp()).sum::<C64>() - y).norm()
            })
            .collect();
        let total: f64 = errs.iter().zip(&weights).map(|(e, w)| e * w).sum();
        if !(total > 0.0) {
            break;
        }
        let n = samples.len() as f64;
        for (w, e) in weights.iter_mut().zip(&errs) {
            *w = (*w * e / total * n).max(1e-8);
        }
        let (next, r) = levenberg_marquardt(dt, samples, &weights, current);
        current = next;
        if r < resid {
            fit = current.clone();
            resid = r;
        }
    }
    if resid > tol {
        return Err(Error::FitFailure {
            residual: resid,
            tolerance: tol,
        });
    }
    Ok((CorrelationSum::new(fit).unwrap_or(CorrelationSum { terms: Vec::new() }), resid))
}

fn max_residual(dt: f64, samples: &[C64], terms: &[ExpTerm]) -> f64 {
    samples
        .iter()
        .enumerate()
        .map(|(k, y)| {
            let t = k as f64 * dt;
            let m: C64 = terms.iter().map(|x| x.c * (-x.mu * t).exp()).sum();
            (m - y).norm()
        })
        .fold(0.0, f64::max)
}

fn linear_amplitudes(dt: f64, samples: &[C64], mus: &[C64]) -> Vec<C64> {
    let n = samples.len();
    let a = CMatrix::from_fn(n, mus.len(), |k, m| (-mus[m] * (k as f64 * dt)).exp());
    let b = CVector::from_column_slice(samples);
    let svd = a.svd(true, true);
    match svd.solve(&b, 1e-14) {
        Ok(x) => x.iter().cloned().collect(),
        Err(_) => vec![ZERO; mus.len()],
    }
}

fn matrix_pencil(dt: f64, samples: &[C64], n_exp: usize) -> Result<Vec<ExpTerm>> {
    let n = samples.len();
    let l = n / 2;
    let rows = n - l;
    let y = CMatrix::from_fn(rows, l + 1, |i, j| samples[i + j]);
    let svd = y.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Numerical("matrix pencil SVD failed".into()))?;
    let k = n_exp.min(vt.nrows());
    let v = vt.rows(0, k).adjoint();
    let v1 = v.rows(0, l).into_owned();
    let v2 = v.rows(1, l).into_owned();
    let pinv = v1
        .pseudo_inverse(1e-14)
        .map_err(|e| Error::Numerical(format!("matrix pencil inverse: {e}")))?;
    let pencil = pinv * v2;
    let (_, tri) = pencil.schur().unpack();
    let mut mus = Vec::with_capacity(n_exp);
    for i in 0..k {
        let z: C64 = tri[(i, i)];
        // e^{−μ dt} = z* in the pencil built from V†, hence the conjugate.
        let z = z.conj();
        let mut mu = if z.norm() > 0.0 { -z.ln() / dt } else { re(50.0 / dt) };
        if !(mu.re > 0.0) || !mu.re.is_finite() {
            mu = c(1e-3 / (dt * n as f64), mu.im);
        }
        mus.push(mu);
    }
    while mus.len() < n_exp {
        mus.push(re(1.0 / (dt * n as f64) * (mus.len() + 1) as f64));
    }
    let amps = linear_amplitudes(dt, samples, &mus);
    Ok(mus
        .into_iter()
        .zip(amps)
        .map(|(mu, c)| ExpTerm { c, mu })
        .collect())
}

fn levenberg_marquardt(
    dt: f64,
    samples: &[C64],
    weights: &[f64],
    init: Vec<ExpTerm>,
) -> (Vec<ExpTerm>, f64) {
    let m = init.len();
    let n = samples.len();
    let pack = |terms: &[ExpTerm]| -> Vec<f64> {
        let mut p = Vec::with_capacity(4 * m);
        for t in terms {
            p.extend_from_slice(&[t.c.re, t.c.im, t.mu.re.max(1e-300).ln(), t.mu.im]);
        }
        p
    };
    let unpack = |p: &[f64]| -> Vec<ExpTerm> {
        (0..m)
            .map(|k| ExpTerm {
                c: c(p[4 * k], p[4 * k + 1]),
                mu: c(p[4 * k + 2].exp(), p[4 * k + 3]),
            })
            .collect()
    };
    let residuals = |p: &[f64]| -> Vec<f64> {
        let terms = unpack(p);
        let mut r = Vec::with_capacity(2 * n);
        for (k, y) in samples.iter().enumerate() {
            let t = k as f64 * dt;
            let mdl: C64 = terms.iter().map(|x| x.c * (-x.mu * t).exp()).sum();
            let d = (mdl - y) * weights[k].sqrt();
            r.push(d.re);
            r.push(d.im);
        }
        r
    };
    let sq = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();
    let mut p = pack(&init);
    let mut r = residuals(&p);
    let mut cost = sq(&r);
    let mut lambda = 1e-3;
    for _ in 0..400 {
        let terms = unpack(&p);
        let mut jac = DMatrix::<f64>::zeros(2 * n, 4 * m);
        for (k, _) in samples.iter().enumerate() {
            let t = k as f64 * dt;
            let sw = weights[k].sqrt();
            for (q, x) in terms.iter().enumerate() {
                let e = (-x.mu * t).exp() * sw;
                let d_c_re = e;
                let d_c_im = I * e;
                // ∂/∂p of Re μ = e^p gives −t c e^{−μt} e^p.
                let d_mu_re = -x.c * e * t * x.mu.re;
                let d_mu_im = -x.c * e * t * I;
                for (col, d) in [d_c_re, d_c_im, d_mu_re, d_mu_im].iter().enumerate() {
                    jac[(2 * k, 4 * q + col)] = d.re;
                    jac[(2 * k + 1, 4 * q + col)] = d.im;
                }
            }
        }
        let rv = DVector::from_column_slice(&r);
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * rv;
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * (jtj[(i, i)].abs() + 1e-12);
            }
            let step = match a.clone().lu().solve(&(-&g)) {
                Some(s) => s,
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            if trial.iter().any(|x| !x.is_finite()) {
                lambda *= 10.0;
                continue;
            }
            let rt = residuals(&trial);
            let ct = sq(&rt);
            if ct < cost {
                let rel = (cost - ct) / cost.max(1e-300);
                p = trial;
                r = rt;
                cost = ct;
                lambda = (lambda * 0.3).max(1e-15);
                improved = rel > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || cost < 1e-30 {
            break;
        }
    }
    let terms = unpack(&p);
    let resid = max_residual(dt, samples, &terms);
    let init_resid = max_residual(dt, samples, &init);
    if init_resid < resid && init.iter().all(|t| t.mu.re > 0.0) {
        (init, init_resid)
    } else {
        (terms, resid)
    }
}

/// Result of integrating a correlation function up to a cutoff time.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovRate {
    /// `∫₀^{t_cut} α(τ)dτ`; real part is the rate, imaginary part the shift.
    pub gamma: C64,
    /// `|α(t_cut)| / |α(0)|`.
    pub tail_ratio: f64,
    pub warning: Option<String>,
}

pub fn markov_rate<F: Fn(f64) -> C64>(alpha: F, t_cut: f64) -> Result<MarkovRate> {
    if !(t_cut > 0.0) {
        return Err(Error::Domain(format!("t_cut must be positive, got {t_cut}")));
    }
    let a0 = alpha(0.0).norm();
    let ps = quad::panels(0.0, t_cut, t_cut / 256.0, false);
    let mut acc = ZERO;
    for &(a, b) in &ps {
        for (x, w) in quad::rule16().mapped(a, b) {
            acc += alpha(x) * w;
        }
    }
    let tail = alpha(t_cut).norm();
    let tail_ratio = if a0 > 0.0 { tail / a0 } else { 0.0 };
    let warning = (tail_ratio >= 1e-10).then(|| {
        format!("kernel not decayed at t_cut = {t_cut}: |alpha(t_cut)|/|alpha(0)| = {tail_ratio:e}")
    });
    Ok(MarkovRate {
        gamma: acc,
        tail_ratio,
        warning,
    })
}

enum NoiseMethod {
    Circulant { sqrt_eig: Vec<f64>, inverse: Arc<dyn Fft<f64>> },
    Cholesky { l: CMatrix },
}

/// Stationary circular complex Gaussian noise with `⟨z_t z_s*⟩ = α(t − s)`
/// and `⟨z_t z_s⟩ = 0` on the points `k·dt`, `k = 0..n`.
pub struct NoiseGenerator {
    n: usize,
    method: NoiseMethod,
}

impl NoiseGenerator {
    pub fn new<F: Fn(f64) -> C64>(alpha: F, n: usize, dt: f64) -> Result<Self> {
        if n == 0 || !(dt > 0.0) {
            return Err(Error::Domain("noise grid must be nonempty with dt > 0".into()));
        }
        let a0 = alpha(0.0);
        if a0.re < 0.0 || a0.im.abs() > 1e-10 * a0.norm().max(1e-300) {
            return Err(Error::KernelInvalid {
                min_eigenvalue: a0.re.min(-a0.im.abs()),
            });
        }
        let scale = a0.re.max(1e-300);
        let mut m = (2 * n).next_power_of_two().max(16);
        for _ in 0..5 {
            let half = m / 2;
            let mut row = vec![ZERO; m];
            for (k, slot) in row.iter_mut().enumerate() {
                *slot = if k <= half {
                    alpha(k as f64 * dt)
                } else {
                    alpha((m - k) as f64 * dt).conj()
                };
            }
            row[half] = c(row[half].re, 0.0);
            let mut planner = FftPlanner::<f64>::new();
            planner.plan_fft_forward(m).process(&mut row);
            let min = row.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
            if min >= -1e-9 * scale * m as f64 {
                let sqrt_eig = row.iter().map(|z| z.re.max(0.0).sqrt()).collect();
                return Ok(Self {
                    n,
                    method: NoiseMethod::Circulant {
                        sqrt_eig,
                        inverse: planner.plan_fft_inverse(m),
                    },
                });
            }
            m *= 2;
        }
        if n > 4096 {
            return Err(Error::KernelInvalid {
                min_eigenvalue: f64::NAN,
            });
        }
        let cov = CMatrix::from_fn(n, n, |i, j| alpha((i as f64 - j as f64) * dt));
        let min_ev = crate::linalg::min_eigenvalue_hermitian(&cov);
        if min_ev < -1e-8 * scale {
            return Err(Error::KernelInvalid {
                min_eigenvalue: min_ev,
            });
        }
        let jitter = CMatrix::identity(n, n) * re(1e-12 * scale + min_ev.min(0.0).abs());
        let chol = Cholesky::new(&cov + jitter).ok_or(Error::KernelInvalid {
            min_eigenvalue: min_ev,
        })?;
        Ok(Self {
            n,
            method: NoiseMethod::Cholesky { l: chol.l() },
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sample(&self, seed: u64, index: u64) -> Vec<C64> {
        let mut r = rng::stream(seed, index);
        match &self.method {
            NoiseMethod::Circulant { sqrt_eig, inverse } => {
                let mut buf: Vec<C64> = sqrt_eig
                    .iter()
                    .map(|&s| rng::complex_normal(&mut r) * s)
                    .collect();
                inverse.process(&mut buf);
                let norm = 1.0 / (buf.len() as f64).sqrt();
                buf.truncate(self.n);
                buf.iter_mut().for_each(|z| *z *= norm);
                buf
            }
            NoiseMethod::Cholesky { l } => {
                let w = CVector::from_iterator(self.n, (0..self.n).map(|_| rng::complex_normal(&mut r)));
                (l * w).iter().cloned().collect()
            }
        }
    }
}

/// One realization of colored noise on every point of `grid`.
pub fn sample_colored_noise<F: Fn(f64) -> C64>(
    alpha: F,
    grid: &TimeGrid,
    seed: u64,
    trajectory_index: u64,
) -> Result<Vec<C64>> {
    Ok(NoiseGenerator::new(alpha, grid.len(), grid.dt)?.sample(seed, trajectory_index))
}

/// Noise pair `(ξ, ν)` for the stochastic Liouville equation.
///
/// `ξ` has covariance `α_R`, `ν` is circular white noise of intensity `s`, and
/// their cross-correlation is `⟨ξ(t)ν(t′)⟩ = 2iα_I(t − t′)θ(t − t′)`. Values are
/// step-constant: entry `k` drives the interval `[t_k, t_{k+1})`.
pub struct SlnNoiseGenerator {
    xi: NoiseGenerator,
    alpha_i: Vec<f64>,
    dt: f64,
    intensity: f64,
}

impl SlnNoiseGenerator {
    pub fn new<FR: Fn(f64) -> f64, FI: Fn(f64) -> f64>(
        alpha_r: FR,
        alpha_i: FI,
        grid: &TimeGrid,
    ) -> Result<Self> {
        let n = grid.len();
        let dt = grid.dt;
        let xi = NoiseGenerator::new(|t| re(alpha_r(t.abs())), n, dt)?;
        let table: Vec<f64> = (0..n).map(|k| alpha_i(k as f64 * dt)).collect();
        let l1 = quad::trapezoid(&table.iter().map(|x| x.abs()).collect::<Vec<_>>(), dt);
        let intensity = if l1 > 0.0 { 4.0 * l1 } else { 0.0 };
        Ok(Self {
            xi,
            alpha_i: table,
            dt,
            intensity,
        })
    }

    pub fn intensity(&self) -> f64 {
        self.intensity
    }

    pub fn sample(&self, seed: u64, index: u64) -> (Vec<C64>, Vec<C64>) {
        let n = self.alpha_i.len();
        let base = self.xi.sample(seed, 2 * index);
        let mut xi: Vec<C64> = base.iter().map(|z| re(std::f64::consts::SQRT_2 * z.re)).collect();
        if self.intensity == 0.0 {
            return (xi, vec![ZERO; n]);
        }
        let mut r = rng::stream(seed, 2 * index + 1);
        let amp = (self.intensity / self.dt).sqrt();
        let nu: Vec<C64> = (0..n).map(|_| rng::complex_normal(&mut r) * amp).collect();
        let pref = c(0.0, 2.0 / self.intensity) * self.dt;
        for j in 0..n {
            let mut acc = self.alpha_i[0] * 0.5 * nu[j].conj();
            for k in 0..j {
                acc += self.alpha_i[j - k] * nu[k].conj();
            }
            xi[j] += pref * acc;
        }
        (xi, nu)
    }
}

pub fn sample_sln_noise_pair<FR: Fn(f64) -> f64, FI: Fn(f64) -> f64>(
    alpha_r: FR,
    alpha_i: FI,
    grid: &TimeGrid,
    seed: u64,
    trajectory_index: u64,
) -> Result<(Vec<C64>, Vec<C64>)> {
    Ok(SlnNoiseGenerator::new(alpha_r, alpha_i, grid)?.sample(seed, trajectory_index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ohmic1() -> SpectralDensity {
        SpectralDensity::ohmic(1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn spectral_density_values() {
        let j = ohmic1();
        assert_eq!(j.eval(0.0).unwrap(), 0.0);
        assert!((j.eval(1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!(j.eval(-0.1).is_err());
        let d = SpectralDensity::drude(0.7, 2.0).unwrap();
        assert!((d.eval(2.0).unwrap() - 0.7 * 2.0 / (4.0 * PI)).abs() < 1e-15);
        let h = SpectralDensity::ohmic_hard(0.5, 2.0, 3.0).unwrap();
        assert_eq!(h.eval(3.5).unwrap(), 0.0);
        assert!((h.eval(1.0).unwrap() - 2.0 * 3.0f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn tabulated_text_parse() {
        let text = "# omega J\n0.0 0.0\n1.0, 2.0 # peak\n\n2.0 0.0\n";
        let j = SpectralDensity::from_table_text(text).unwrap();
        assert!((j.eval(0.5).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(j.eval(3.0).unwrap(), 0.0);
        assert!((j.integral().unwrap() - 2.0).abs() < 1e-13);
        assert!(SpectralDensity::from_table_text("1 2 3\n").is_err());
        assert!(SpectralDensity::from_table_text("1 2\n0.5 1\n").is_err());
    }

    #[test]
    fn ohmic_zero_t_closed_form() {
        let j = SpectralDensity::ohmic(1.0, 0.3, 2.0).unwrap();
        for &t in &[0.0, 0.1, 1.0, 5.0, 20.0] {
            let got = correlation_zero_t(&j, t).unwrap();
            let exact = re(0.3 * 4.0) / (C64::new(1.0, 2.0 * t) * C64::new(1.0, 2.0 * t));
            assert!((got - exact).norm() < 1e-8 * exact.norm().max(1e-3), "t={t}");
        }
        let a0 = correlation_zero_t(&j, 0.0).unwrap();
        assert!(a0.im.abs() < 1e-14 && (a0.re - j.integral().unwrap()).abs() < 1e-10);
        let neg = correlation_zero_t(&j, -1.3).unwrap();
        assert!((neg - correlation_zero_t(&j, 1.3).unwrap().conj()).norm() < 1e-14);
    }

    #[test]
    fn zero_temperature_pair() {
        let bath = BathSpec::zero_temperature(ohmic1());
        let (m, p) = bath.correlation_pair(0.7).unwrap();
        assert_eq!(p, ZERO);
        assert!((m - correlation_zero_t(&bath.j, 0.7).unwrap()).norm() < 1e-15);
    }

    #[test]
    fn thermal_kernel_small_time_structure() {
        // Im α_T(t) = −∫J sin(ωt) ≈ −t ∫ωJ for small t.
        let j = ohmic1();
        let bath = BathSpec::bosonic(j.clone(), 2.0).unwrap();
        let t = 1e-6;
        let a = bath.correlation_thermal(t).unwrap();
        let first_moment = j.integrate_weighted(|w| w).unwrap();
        assert!((a.im / t + first_moment).abs() < 1e-5 * first_moment);
        let coth = j.integrate_weighted(|w| 1.0 / (w).tanh()).unwrap();
        assert!((bath.correlation_thermal(0.0).unwrap().re - coth).abs() < 1e-7 * coth);
    }

    #[test]
    fn fermionic_rejected() {
        let b = BathSpec::new(ohmic1(), 1.0, Statistics::Fermionic).unwrap();
        assert!(matches!(b.correlation_thermal(1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn drude_high_temperature_single_exponential() {
        let (lambda, gamma) = (0.1, 1.0);
        let beta = 0.1 / gamma;
        let bath = BathSpec::bosonic(SpectralDensity::drude(lambda, gamma).unwrap(), beta).unwrap();
        let c0 = matsubara_expansion(&bath, 0).unwrap().terms()[0];
        let expected = c(lambda * gamma * gamma / 4.0 / (0.5 * beta * gamma).tan(), -lambda * gamma * gamma / 4.0);
        assert!((c0.c - expected).norm() < 1e-14);
        assert_eq!(c0.mu, re(gamma));
        let mut worst: f64 = 0.0;
        for k in 1..=50 {
            let t = 5.0 / gamma * k as f64 / 50.0;
            let full = bath.correlation_thermal(t).unwrap();
            let approx = c0.c * (-gamma * t).exp();
            worst = worst.max((full - approx).norm() / approx.norm());
        }
        assert!(worst < 0.02, "worst {worst}");
    }

    #[test]
    fn matsubara_matches_quadrature() {
        let gamma = 1.0;
        let bath = BathSpec::bosonic(SpectralDensity::drude(0.2, gamma).unwrap(), 1.0).unwrap();
        let (sum, m, r) = matsubara_converged(&bath, 1e-6, 0.1 / gamma, 10.0 / gamma).unwrap();
        let scale = sum.terms()[0].c.norm();
        assert!(r <= 1e-6 * scale, "m={m} r={r}");
        let check = MatsubaraCheck::new(&bath, 0.1, 10.0, 30).unwrap();
        let r0 = check.residual(&matsubara_expansion(&bath, 2).unwrap());
        let r4 = check.residual(&matsubara_expansion(&bath, 6).unwrap());
        assert!(r4 <= r0);
    }

    #[test]
    fn matsubara_degenerate_pole() {
        let gamma = 1.0;
        let beta = 2.0 * PI / gamma;
        let bath = BathSpec::bosonic(SpectralDensity::drude(0.2, gamma).unwrap(), beta).unwrap();
        assert_eq!(matsubara_expansion(&bath, 3), Err(Error::DegeneratePole { m: 1 }));
    }

    #[test]
    fn fit_single_exponential() {
        let dt = 0.05;
        let (g, mu) = (c(0.7, -0.2), c(1.3, 0.4));
        let samples: Vec<C64> = (0..200).map(|k| g * (-mu * (k as f64 * dt)).exp()).collect();
        let (fit, r) = fit_correlation(dt, &samples, 1, 1e-8).unwrap();
        assert!(r < 1e-10);
        assert!((fit.terms()[0].c - g).norm() < 1e-8);
        assert!((fit.terms()[0].mu - mu).norm() < 1e-8);
        assert!(fit_correlation(dt, &samples, 0, 1.0).is_err());
    }

    #[test]
    fn fit_ohmic_four_terms() {
        let dt = 0.05;
        let samples: Vec<C64> = (0..=200)
            .map(|k| {
                let z = c(1.0, k as f64 * dt);
                re(1.0) / (z * z)
            })
            .collect();
        let (fit, r) = fit_correlation(dt, &samples, 4, 1e-3).unwrap();
        assert!(r < 1e-3, "residual {r}");
        assert!(fit.terms().iter().all(|t| t.mu.re > 0.0));
    }

    #[test]
    fn markov_rate_examples() {
        let r = markov_rate(|t| re(2.0 * (-4.0 * t).exp()), 20.0).unwrap();
        assert!((r.gamma - re(0.5)).norm() < 1e-12);
        assert!(r.warning.is_none());
        let z = markov_rate(|_| ZERO, 1.0).unwrap();
        assert_eq!(z.gamma, ZERO);
        let w = markov_rate(|t| re((-0.1 * t).exp()), 1.0).unwrap();
        assert!(w.warning.is_some());
    }

    #[test]
    fn markov_rate_symmetric_lorentzian_has_no_shift() {
        // Kernel of a Lorentzian J centred at ω₀ in the frame rotating at ω₀:
        // α(t) ≈ w e^{−Γt}, real, so the shift vanishes.
        let (w0, width) = (5.0, 0.2);
        let j = SpectralDensity::lorentzian(1.0, w0, width, 200.0).unwrap();
        let rate = markov_rate(
            |t| correlation_zero_t(&j, t).unwrap() * C64::from_polar(1.0, w0 * t),
            60.0,
        )
        .unwrap();
        assert!((rate.gamma.re - 1.0 / width).abs() / (1.0 / width) < 0.02);
        assert!(rate.gamma.im.abs() < 0.05 * rate.gamma.re);
    }

    #[test]
    fn colored_noise_statistics() {
        let (g, gamma) = (1.0, 2.0);
        let alpha = |t: f64| re(g * (-gamma * t.abs()).exp()) * C64::from_polar(1.0, -0.5 * t);
        let grid = TimeGrid::new(0.0, 0.05, 80).unwrap();
        let gen = NoiseGenerator::new(alpha, grid.len(), grid.dt).unwrap();
        let n = 10_000;
        let mut mean = vec![ZERO; grid.len()];
        let mut cross = vec![ZERO; grid.len()];
        let mut pseudo = vec![ZERO; grid.len()];
        for i in 0..n {
            let z = gen.sample(11, i as u64);
            for k in 0..grid.len() {
                mean[k] += z[k];
                cross[k] += z[k] * z[0].conj();
                pseudo[k] += z[k] * z[0];
            }
        }
        let nf = n as f64;
        for k in 0..grid.len() {
            assert!((mean[k] / nf).norm() < 3.0 * (g / nf).sqrt() * 1.5);
            let target = alpha(grid.t(k));
            assert!((cross[k] / nf - target).norm() < 5.0 * g / nf.sqrt());
            assert!((pseudo[k] / nf).norm() < 3.0 * g / nf.sqrt() * 1.5);
        }
        assert_eq!(gen.sample(11, 5), gen.sample(11, 5));
    }

    #[test]
    fn cholesky_path_matches_statistics() {
        // A kernel whose circulant embedding is indefinite at every size tried.
        let alpha = |t: f64| re((-(t * t) * 50.0).exp());
        let gen = NoiseGenerator::new(alpha, 20, 0.05).unwrap();
        let n = 20_000;
        let mut cov = 0.0;
        for i in 0..n {
            let z = gen.sample(3, i);
            cov += (z[1] * z[0].conj()).re;
        }
        assert!((cov / n as f64 - alpha(0.05).re).abs() < 0.05);
    }

    #[test]
    fn invalid_kernel_rejected() {
        let alpha = |t: f64| if t == 0.0 { re(1.0) } else { re(2.0) };
        assert!(matches!(
            NoiseGenerator::new(alpha, 10, 0.1),
            Err(Error::KernelInvalid { .. })
        ));
    }

    #[test]
    fn sln_noise_statistics() {
        let gamma = 1.0;
        let a_r = |t: f64| 0.5 * (-gamma * t).exp();
        let a_i = |t: f64| -0.2 * (-gamma * t).exp();
        let grid = TimeGrid::new(0.0, 0.05, 40).unwrap();
        let gen = SlnNoiseGenerator::new(a_r, a_i, &grid).unwrap();
        let n = 10_000;
        let (j, l) = (30, 10);
        let mut xx = ZERO;
        let mut xn = ZERO;
        let mut xn_rev = ZERO;
        let mut nn = ZERO;
        for i in 0..n {
            let (xi, nu) = gen.sample(5, i);
            xx += xi[j] * xi[l];
            xn += xi[j] * nu[l];
            xn_rev += xi[l] * nu[j];
            nn += nu[j] * nu[l];
        }
        let nf = n as f64;
        let s = gen.intensity();
        let sig_nu = (s / grid.dt).sqrt();
        assert!(((xx / nf).re - a_r(((j - l) as f64) * grid.dt)).abs() < 5.0 * 0.5 / nf.sqrt());
        let target = c(0.0, 2.0 * a_i((j - l) as f64 * grid.dt)) * grid.dt;
        assert!((xn / nf * grid.dt - target).norm() < 5.0 * sig_nu * grid.dt / nf.sqrt());
        assert!((xn_rev / nf).norm() < 5.0 * sig_nu / nf.sqrt());
        assert!((nn / nf).norm() < 5.0 * sig_nu * sig_nu / nf.sqrt());
    }

    proptest! {
        #[test]
        fn bose_detailed_balance(w in 0.01f64..20.0, beta in 0.05f64..5.0) {
            let b = BathSpec::bosonic(ohmic1(), beta).unwrap();
            let n = b.occupation(w);
            prop_assert!(((n + 1.0) - (beta * w).exp() * n).abs() <= 1e-12 * (n + 1.0));
        }

        #[test]
        fn correlation_sum_hermitian(t in -5.0f64..5.0, cr in -1.0f64..1.0, mi in -2.0f64..2.0) {
            let s = CorrelationSum::new(vec![
                ExpTerm { c: c(1.0, cr), mu: c(0.5, mi) },
                ExpTerm { c: c(0.3, 0.0), mu: c(2.0, 0.0) },
            ]).unwrap();
            prop_assert_eq!(s.eval(-t), s.eval(t).conj());
        }

        #[test]
        fn quadrature_kernel_hermitian(t in 0.0f64..8.0) {
            let j = SpectralDensity::ohmic(0.7, 0.5, 1.5).unwrap();
            let a = correlation_zero_t(&j, t).unwrap();
            let b = correlation_zero_t(&j, -t).unwrap();
            prop_assert!((a - b.conj()).norm() < 1e-10);
        }
    }
}
