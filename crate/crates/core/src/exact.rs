//! Exactly solvable reference dynamics: the one-excitation sector, quantum
//! Brownian motion coefficients and pure dephasing.

use std::sync::Arc;

use crate::bath::{BathSpec, Statistics};
use crate::error::{Error, Result};
use crate::linalg::{c, eigh, re, unitary_propagator, CMatrix, DensityMatrix, Operator, TimeGrid, Trajectory, C64, I, ZERO};
use crate::mastereq::{SystemSpec, TimeLocalChannel, TimeLocalSpec};
use crate::quad;

/// Trapezoid stepping for `y' = −iω y − ∫₀^t k(t − s) y(s) ds`, `y(0) = 1`,
/// with `kernel[n] = k(n·dt)`. Returns `(y, y')` on the same points.
pub fn volterra(kernel: &[C64], omega: f64, dt: f64) -> Result<(Vec<C64>, Vec<C64>)> {
    let n = kernel.len();
    let mut y = vec![ZERO; n];
    let mut dy = vec![ZERO; n];
    if n == 0 {
        return Ok((y, dy));
    }
    y[0] = re(1.0);
    dy[0] = -I * omega;
    let k0 = kernel[0];
    let denom = re(1.0) + I * (0.5 * dt * omega) + k0 * (0.25 * dt * dt);
    for m in 1..n {
        let mut partial = kernel[m] * y[0] * 0.5;
        for j in 1..m {
            partial += kernel[m - j] * y[j];
        }
        partial *= dt;
        y[m] = (y[m - 1] + (dy[m - 1] - partial) * (0.5 * dt)) / denom;
        dy[m] = -I * omega * y[m] - partial - k0 * y[m] * (0.5 * dt);
        if !(y[m].re.is_finite() && y[m].im.is_finite()) || y[m].norm() > 1e6 {
            return Err(Error::NonFinite {
                step: m,
                time: m as f64 * dt,
            });
        }
    }
    Ok((y, dy))
}

fn sample<F: Fn(f64) -> C64>(alpha: &F, grid: &TimeGrid) -> Result<Vec<C64>> {
    (0..grid.len())
        .map(|k| {
            let v = alpha(k as f64 * grid.dt);
            if v.re.is_finite() && v.im.is_finite() {
                Ok(v)
            } else {
                Err(Error::Domain(format!("kernel is not finite at t = {}", k as f64 * grid.dt)))
            }
        })
        .collect()
}

/// Amplitude of the excited state in the one-excitation sector.
#[derive(Clone, Debug, PartialEq)]
pub struct AmplitudeSolution {
    pub times: Vec<f64>,
    /// Interaction-picture amplitude, `A(0) = 1`.
    pub a: Vec<C64>,
    pub a_dot: Vec<C64>,
    pub omega_s: Option<f64>,
}

impl AmplitudeSolution {
    pub fn with_system_frequency(mut self, omega_s: f64) -> Self {
        self.omega_s = Some(omega_s);
        self
    }

    /// `u(t) = e^{−iω_s t} A(t)`; equal to `A` when no frequency is set.
    pub fn u(&self) -> Vec<C64> {
        let w = self.omega_s.unwrap_or(0.0);
        self.times
            .iter()
            .zip(&self.a)
            .map(|(&t, &a)| C64::from_polar(1.0, -w * t) * a)
            .collect()
    }

    pub fn population(&self) -> Vec<f64> {
        self.a.iter().map(|a| a.norm_sqr()).collect()
    }
}

/// Solves `dA/dt = −∫₀^t α(t − τ) A(τ) dτ` where `α` is the bath correlation
/// in the frame rotating with the system frequency.
pub fn one_excitation_amplitude<F: Fn(f64) -> C64>(alpha: F, grid: &TimeGrid) -> Result<AmplitudeSolution> {
    let kernel = sample(&alpha, grid)?;
    let (a, a_dot) = volterra(&kernel, 0.0, grid.dt)?;
    if let Some(k) = a.iter().position(|z| z.norm() > 1.0 + 1e-8) {
        return Err(Error::Numerical(format!(
            "|A| = {} exceeds 1 at t = {}; refine the time grid",
            a[k].norm(),
            grid.t(k)
        )));
    }
    Ok(AmplitudeSolution {
        times: grid.times(),
        a,
        a_dot,
        omega_s: None,
    })
}

/// Exact time-local rates of the amplitude-damping master equation.
#[derive(Clone, Debug, PartialEq)]
pub struct TclRates {
    pub times: Vec<f64>,
    pub delta: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub u: Vec<C64>,
}

/// Locates the first time the map `u` vanishes (|u| < 1e-10 or a sign flip
/// through the origin between grid points).
fn first_zero(u: &[C64], times: &[f64]) -> Option<f64> {
    for k in 0..u.len() {
        if u[k].norm() < 1e-10 {
            return Some(times[k]);
        }
        if k + 1 < u.len() {
            let d = u[k + 1] - u[k];
            let dn = d.norm_sqr();
            if dn == 0.0 {
                continue;
            }
            let s = -(u[k].conj() * d).re / dn;
            if (0.0..=1.0).contains(&s) {
                let dist = (u[k] + d * s).norm();
                if dist < 1e-10 || ((u[k].conj() * u[k + 1]).re < 0.0 && dist < 1e-2 * dn.sqrt()) {
                    return Some(times[k] + s * (times[k + 1] - times[k]));
                }
            }
        }
    }
    None
}

/// `Δ = −Im(u̇/u)`, `γ1 = −Re(u̇/u)` with `u = e^{−iω_s t}A`.
pub fn exact_tcl_rates<F: Fn(f64) -> C64>(alpha: F, omega_s: f64, grid: &TimeGrid) -> Result<TclRates> {
    let sol = one_excitation_amplitude(alpha, grid)?.with_system_frequency(omega_s);
    let u = sol.u();
    if let Some(t) = first_zero(&u, &sol.times) {
        return Err(Error::MapNotInvertible { time: t });
    }
    let mut delta = Vec::with_capacity(u.len());
    let mut gamma1 = Vec::with_capacity(u.len());
    for (a, ad) in sol.a.iter().zip(&sol.a_dot) {
        let r = -I * omega_s + ad / a;
        delta.push(-r.im);
        gamma1.push(-r.re);
    }
    Ok(TclRates {
        times: sol.times,
        delta,
        gamma1,
        u,
    })
}

/// Four-point Lagrange interpolation on a uniform grid.
fn interp(times: &[f64], y: &[f64], t: f64) -> f64 {
    let n = y.len();
    if n == 1 {
        return y[0];
    }
    let dt = times[1] - times[0];
    let x = ((t - times[0]) / dt).clamp(0.0, (n - 1) as f64);
    if n < 4 {
        let k = (x.floor() as usize).min(n - 2);
        let s = x - k as f64;
        return y[k] * (1.0 - s) + y[k + 1] * s;
    }
    let k = (x.floor() as usize).saturating_sub(1).min(n - 4);
    let mut out = 0.0;
    for i in 0..4 {
        let mut w = 1.0;
        for j in 0..4 {
            if i != j {
                w *= (x - (k + j) as f64) / ((i as f64) - (j as f64));
            }
        }
        out += w * y[k + i];
    }
    out
}

impl TclRates {
    /// Time-local generator `−iΔ(t)[σ⁺σ⁻, ·] + γ1(t)D[σ⁻]` with rates
    /// interpolated between grid points.
    pub fn time_local_spec(&self) -> TimeLocalSpec {
        let times = Arc::new(self.times.clone());
        let delta = Arc::new(self.delta.clone());
        let gamma = Arc::new(self.gamma1.clone());
        let sm = Operator::sigma_minus();
        let n_op = Operator::sigma_plus().matrix() * sm.matrix();
        let system = SystemSpec::new(Operator::zeros(2), vec![sm.clone()]).expect("valid two-level spec");
        let (t1, t2) = (times.clone(), times);
        TimeLocalSpec {
            system,
            hamiltonian: Some(Arc::new(move |t| &n_op * re(interp(&t1, &delta, t)))),
            channels: vec![TimeLocalChannel {
                op: {
                    let m = sm.matrix().clone();
                    Arc::new(move |_| m.clone())
                },
                rate: Arc::new(move |t| interp(&t2, &gamma, t)),
            }],
        }
    }

    /// Exact state at grid index `k` from the block form of the map
    /// (basis order excited, ground).
    pub fn state(&self, rho0: &DensityMatrix, k: usize) -> CMatrix {
        amplitude_damping_state(self.u[k], rho0.matrix())
    }
}

/// `ρ_ee = |u|²ρ_ee(0)`, `ρ_eg = u ρ_eg(0)`, `ρ_gg = 1 − ρ_ee`.
pub fn amplitude_damping_state(u: C64, rho0: &CMatrix) -> CMatrix {
    let p = u.norm_sqr() * rho0[(0, 0)].re;
    let coh = u * rho0[(0, 1)];
    CMatrix::from_row_slice(
        2,
        2,
        &[re(p), coh, coh.conj(), rho0[(1, 1)] + rho0[(0, 0)] * (1.0 - u.norm_sqr())],
    )
}

/// Coefficients of the exact damped-oscillator master equation.
#[derive(Clone, Debug, PartialEq)]
pub struct QbmCoefficients {
    pub times: Vec<f64>,
    pub delta: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub u: Vec<C64>,
    pub v: Vec<f64>,
    pub statistics: Statistics,
}

/// `u̇ + iω_s u + ∫α u = 0` and
/// `v(t) = ∫₀^t∫₀^t u(a) ᾱ⁺(a' − a) u*(a') da da'` (`ᾱ⁺` the complex conjugate),
/// with both kernels given in the laboratory frame. `alpha` is the
/// temperature-independent part; thermal occupation enters only through `alpha_plus`.
pub fn qbm_coefficients<F, G>(
    alpha: F,
    alpha_plus: G,
    omega_s: f64,
    grid: &TimeGrid,
    statistics: Statistics,
) -> Result<QbmCoefficients>
where
    F: Fn(f64) -> C64,
    G: Fn(f64) -> C64,
{
    let kernel = sample(&alpha, grid)?;
    let (u, du) = volterra(&kernel, omega_s, grid.dt)?;
    let times = grid.times();
    if let Some(t) = first_zero(&u, &times) {
        return Err(Error::MapNotInvertible { time: t });
    }
    let nker: Vec<C64> = sample(&alpha_plus, grid)?.iter().map(|z| z.conj()).collect();
    let n = u.len();
    // g_ij = u_i N(t_j − t_i) u_j*, N(−τ) = N(τ)*.
    let g = |i: usize, j: usize| -> C64 {
        let nk = if j >= i { nker[j - i] } else { nker[i - j].conj() };
        u[i] * nk * u[j].conj()
    };
    let h = grid.dt;
    let mut v = vec![0.0; n];
    let mut full = ZERO;
    let mut row0 = ZERO;
    let mut col0 = ZERO;
    for m in 0..n {
        for k in 0..m {
            full += g(m, k) + g(k, m);
        }
        full += g(m, m);
        row0 += g(0, m);
        col0 += g(m, 0);
        if m == 0 {
            continue;
        }
        let mut row_m = ZERO;
        let mut col_m = ZERO;
        for k in 0..=m {
            row_m += g(m, k);
            col_m += g(k, m);
        }
        let corners = g(0, 0) + g(0, m) + g(m, 0) + g(m, m);
        let s = full - (row0 + row_m + col0 + col_m) * 0.5 + corners * 0.25;
        v[m] = s.re * h * h;
    }
    let vc: Vec<C64> = v.iter().map(|&x| re(x)).collect();
    let dv = quad::derivative_4th(&vc, h);
    let mut delta = Vec::with_capacity(n);
    let mut gamma1 = Vec::with_capacity(n);
    let mut gamma2 = Vec::with_capacity(n);
    for k in 0..n {
        let r = du[k] / u[k];
        delta.push(-r.im);
        gamma1.push(-r.re);
        gamma2.push(dv[k].re - 2.0 * v[k] * r.re);
    }
    Ok(QbmCoefficients {
        times,
        delta,
        gamma1,
        gamma2,
        u,
        v,
        statistics,
    })
}

impl QbmCoefficients {
    /// Fock-space generator `−iΔ(t)[a†a, ·] + (γ1 + γ2/2)D[a] + (γ2/2)D[a†]`
    /// truncated to `n_max + 1` levels, reproducing `⟨a†a⟩' = −2γ1⟨a†a⟩ + γ2`.
    pub fn time_local_spec(&self, n_max: usize) -> Result<TimeLocalSpec> {
        if self.statistics != Statistics::Bosonic {
            return Err(Error::Unsupported("fermionic QBM generator".into()));
        }
        let a = Operator::annihilation(n_max);
        let ad = a.dagger();
        let num = ad.matrix() * a.matrix();
        let times = Arc::new(self.times.clone());
        let delta = Arc::new(self.delta.clone());
        let down: Arc<Vec<f64>> = Arc::new(self.gamma1.iter().zip(&self.gamma2).map(|(g1, g2)| g1 + 0.5 * g2).collect());
        let up: Arc<Vec<f64>> = Arc::new(self.gamma2.iter().map(|g2| 0.5 * g2).collect());
        let channel = |op: &Operator, rate: Arc<Vec<f64>>| {
            let m = op.matrix().clone();
            let t = times.clone();
            TimeLocalChannel {
                op: Arc::new(move |_| m.clone()),
                rate: Arc::new(move |x| interp(&t, &rate, x)),
            }
        };
        let channels = vec![channel(&a, down), channel(&ad, up)];
        let t = times.clone();
        Ok(TimeLocalSpec {
            system: SystemSpec::new(Operator::zeros(n_max + 1), vec![a.clone(), ad.clone()])?,
            hamiltonian: Some(Arc::new(move |x| &num * re(interp(&t, &delta, x)))),
            channels,
        })
    }
}

/// Decay `Γ(t) = ∫ J coth(βω/2)(1 − cos ωt)/ω²` and phase
/// `φ(t) = ∫ J (ωt − sin ωt)/ω²` for unit coupling.
pub fn dephasing_factors(bath: &BathSpec, t: f64) -> Result<(f64, f64)> {
    bath.require_bosonic()?;
    if t == 0.0 {
        return Ok((0.0, 0.0));
    }
    let j = &bath.j;
    let top = j.quadrature_max().min(4000.0 * j.feature_width());
    let width = 0.5 * std::f64::consts::PI / t.abs();
    let beta = bath.beta;
    let (g, rg) = j.integrate_weighted_with(
        |w| {
            if w == 0.0 {
                return 0.0;
            }
            let coth = if beta.is_infinite() { 1.0 } else { 1.0 / (0.5 * beta * w).tanh() };
            2.0 * (0.5 * w * t).sin().powi(2) * coth / (w * w)
        },
        width,
        top,
    );
    let (p, rp) = j.integrate_weighted_with(
        |w| {
            let x = w * t;
            if x.abs() < 1e-3 {
                // ωt − sin ωt ≈ x³/6 − x⁵/120
                t * t * x * (1.0 / 6.0 - x * x / 120.0)
            } else {
                (x - x.sin()) / (w * w)
            }
        },
        width,
        top,
    );
    let res = rg.max(rp);
    if !g.is_finite() || !p.is_finite() || res > 1e-8 * (g.abs() + p.abs()).max(1e-12) {
        return Err(Error::Quadrature {
            residual: res,
            context: format!("dephasing integrals at t = {t}"),
        });
    }
    Ok((g, p))
}

/// Dephasing trajectory plus the decoherence functions used to build it.
#[derive(Clone, Debug, PartialEq)]
pub struct DephasingSolution {
    pub trajectory: Trajectory,
    pub gamma: Vec<f64>,
    pub phase: Vec<f64>,
}

/// Exact reduced dynamics for `H = H_S + L⊗B + H_B` with `[L, H_S] = 0`:
/// in the eigenbasis of `L`, `ρ_nm` picks up
/// `exp(−(l_n − l_m)²Γ(t) + i(l_n² − l_m²)φ(t))` on top of the free evolution.
pub fn dephasing_exact(
    system: &SystemSpec,
    bath: &BathSpec,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
) -> Result<DephasingSolution> {
    if system.couplings.len() != 1 {
        return Err(Error::Unsupported("pure dephasing needs exactly one coupling".into()));
    }
    let l = &system.couplings[0];
    if !l.is_hermitian(1e-12) {
        return Err(Error::Domain("dephasing coupling must be Hermitian".into()));
    }
    let h = system.h.matrix();
    let comm = h * l.matrix() - l.matrix() * h;
    if comm.iter().map(|z| z.norm()).fold(0.0, f64::max) > 1e-12 {
        return Err(Error::Domain("coupling does not commute with the system Hamiltonian".into()));
    }
    if rho0.dim() != system.dim() {
        return Err(Error::Dimension("initial state dimension mismatch".into()));
    }
    let (lv, p) = eigh(l.matrix());
    let pd = p.adjoint();
    let rho_l = &pd * rho0.matrix() * &p;
    let d = system.dim();
    let mut states = Vec::with_capacity(grid.len());
    let mut gammas = Vec::with_capacity(grid.len());
    let mut phases = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let t = grid.t(k) - grid.t0;
        let (g, ph) = dephasing_factors(bath, t)?;
        let mut r = rho_l.clone();
        for n in 0..d {
            for m in 0..d {
                let dl = lv[n] - lv[m];
                let sl = lv[n] * lv[n] - lv[m] * lv[m];
                r[(n, m)] *= c(-dl * dl * g, sl * ph).exp();
            }
        }
        let u = unitary_propagator(h, t);
        states.push(&u * (&p * r * &pd) * u.adjoint());
        gammas.push(g);
        phases.push(ph);
    }
    let trajectory = Trajectory::new(grid.times(), states);
    trajectory.check_invariants(true)?;
    Ok(DephasingSolution {
        trajectory,
        gamma: gammas,
        phase: phases,
    })
}
