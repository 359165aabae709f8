//! Deterministic reduced-density-matrix solvers.
//!
//! Dissipators follow `Δ(2CρC† − {C†C, ρ})`, so a channel with rate `Δ`
//! empties the excited state of `C = σ⁻` as `e^{−2Δt}`.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::bath::{BathSpec, Correlation};
use crate::error::{Error, Result};
use crate::linalg::{
    eigh, integrate, norm1, propagate_constant, re, substeps_for, unvec_slice, vec, CMatrix,
    DensityMatrix, Operator, SuperOperator, TimeGrid, Trajectory, C64, I,
};
use crate::quad;

/// System Hamiltonian plus the operators that couple to the environment.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemSpec {
    pub h: Operator,
    pub couplings: Vec<Operator>,
    pub labels: Vec<String>,
}

impl SystemSpec {
    pub fn new(h: Operator, couplings: Vec<Operator>) -> Result<Self> {
        let labels = (0..couplings.len()).map(|k| format!("L{k}")).collect();
        Self::with_labels(h, couplings, labels)
    }

    pub fn with_labels(h: Operator, couplings: Vec<Operator>, labels: Vec<String>) -> Result<Self> {
        let herm = h.hermiticity_residual();
        if herm > 1e-10 {
            return Err(Error::Domain(format!(
                "system Hamiltonian is not Hermitian (residual {herm:e})"
            )));
        }
        if let Some(bad) = couplings.iter().find(|l| l.dim() != h.dim()) {
            return Err(Error::Dimension(format!(
                "coupling of dim {} does not match Hamiltonian dim {}",
                bad.dim(),
                h.dim()
            )));
        }
        if labels.len() != couplings.len() {
            return Err(Error::Dimension("one label per coupling required".into()));
        }
        Ok(Self { h, couplings, labels })
    }

    pub fn dim(&self) -> usize {
        self.h.dim()
    }
}

/// Markovian channels `C_k` (the system couplings) with rates `Δ_k ≥ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LindbladSpec {
    pub system: SystemSpec,
    pub rates: Vec<f64>,
}

impl LindbladSpec {
    pub fn new(system: SystemSpec, rates: Vec<f64>) -> Result<Self> {
        if rates.len() != system.couplings.len() {
            return Err(Error::Dimension(format!(
                "{} rates for {} channels",
                rates.len(),
                system.couplings.len()
            )));
        }
        if let Some(r) = rates.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
            return Err(Error::Domain(format!("Lindblad rates must be >= 0, got {r}")));
        }
        Ok(Self { system, rates })
    }

    pub fn generator(&self) -> SuperOperator {
        let mut g = SuperOperator::hamiltonian(self.system.h.matrix());
        for (cop, &rate) in self.system.couplings.iter().zip(&self.rates) {
            g = g.add(&SuperOperator::dissipator(cop.matrix(), rate));
        }
        g
    }
}

fn check_dims(dim: usize, rho0: &DensityMatrix) -> Result<()> {
    if rho0.dim() != dim {
        return Err(Error::Dimension(format!(
            "initial state dim {} does not match system dim {dim}",
            rho0.dim()
        )));
    }
    Ok(())
}

pub fn lindblad_evolve(spec: &LindbladSpec, rho0: &DensityMatrix, grid: &TimeGrid) -> Result<Trajectory> {
    check_dims(spec.system.dim(), rho0)?;
    let states = propagate_constant(&spec.generator(), rho0.matrix(), grid)?;
    let traj = Trajectory::new(grid.times(), states);
    traj.check_invariants(true)?;
    Ok(traj)
}

/// Controls for [`tcl2_evolve`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tcl2Options {
    /// RK4 steps per output interval.
    pub substeps: usize,
    /// Refuse runs whose memory-integral work (fine points × d²) exceeds this.
    pub budget: u64,
}

impl Default for Tcl2Options {
    fn default() -> Self {
        Self {
            substeps: 2,
            budget: 200_000_000,
        }
    }
}

/// Second-order time-convolutionless master equation for a single coupling `L`:
///
/// `dρ/dt = −i[H, ρ] + ([Λ⁻(t)ρ, L†] + [Λ⁺(t)ρ, L] + h.c.)` with
/// `Λ⁻ = ∫₀^t α⁻(τ) L(−τ) dτ` and `Λ⁺ = ∫₀^t α⁺(τ) L†(−τ) dτ`.
pub fn tcl2_evolve(
    system: &SystemSpec,
    kernel: &dyn Correlation,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    opts: Tcl2Options,
) -> Result<Trajectory> {
    check_dims(system.dim(), rho0)?;
    if system.couplings.len() != 1 {
        return Err(Error::Unsupported(format!(
            "TCL2 supports exactly one coupling operator, got {}",
            system.couplings.len()
        )));
    }
    let d = system.dim();
    let sub = opts.substeps.max(1);
    let n_fine = 2 * sub * grid.n_steps + 1;
    let work = (n_fine as u64) * (d * d) as u64;
    if work > opts.budget {
        let factor = (work as f64 / opts.budget as f64).ceil();
        return Err(Error::Budget {
            what: format!(
                "TCL2 memory integrals; try dt >= {:.3e}",
                grid.dt * factor
            ),
            required: work,
            budget: opts.budget,
        });
    }
    let (eps, v) = eigh(system.h.matrix());
    let vd = v.adjoint();
    let l = &vd * system.couplings[0].matrix() * &v;
    let ld = l.adjoint();
    let h = 0.5 * grid.dt / sub as f64;

    // Cumulative trapezoid for F^∓_mn(t) = ∫₀^t α^∓(τ) e^{−iω_mn τ} dτ.
    let mut lam_m = Vec::with_capacity(n_fine);
    let mut lam_p = Vec::with_capacity(n_fine);
    let mut f_m = CMatrix::zeros(d, d);
    let mut f_p = CMatrix::zeros(d, d);
    let mut prev: Option<(C64, C64)> = None;
    for k in 0..n_fine {
        let tau = k as f64 * h;
        let (am, ap) = kernel.pair(tau)?;
        if !(am.re.is_finite() && am.im.is_finite() && ap.re.is_finite() && ap.im.is_finite()) {
            return Err(Error::Numerical(format!("kernel not finite at tau = {tau}")));
        }
        if let Some((pm, pp)) = prev {
            let tau0 = tau - h;
            for m in 0..d {
                for n in 0..d {
                    let w = eps[m] - eps[n];
                    let e0 = C64::from_polar(1.0, -w * tau0);
                    let e1 = C64::from_polar(1.0, -w * tau);
                    f_m[(m, n)] += (pm * e0 + am * e1) * (0.5 * h);
                    f_p[(m, n)] += (pp * e0 + ap * e1) * (0.5 * h);
                }
            }
        }
        prev = Some((am, ap));
        lam_m.push(l.component_mul(&f_m));
        lam_p.push(ld.component_mul(&f_p));
    }

    let e = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(d, eps.iter().map(|&x| re(x))));
    let rho_e = &vd * rho0.matrix() * &v;
    let t0 = grid.t0;
    let states = integrate(
        |t, y, dy| {
            let k = (((t - t0) / h).round() as usize).min(n_fine - 1);
            let rho = unvec_slice(y, d);
            let a = &lam_m[k] * &rho;
            let b = &lam_p[k] * &rho;
            let x = &a * &ld - &ld * &a + &b * &l - &l * &b;
            let out = (&e * &rho - &rho * &e) * (-I) + &x + x.adjoint();
            dy.copy_from_slice(out.as_slice());
        },
        vec(&rho_e).as_slice(),
        grid,
        sub,
    )?;
    let states: Vec<CMatrix> = states
        .iter()
        .map(|y| &v * unvec_slice(y, d) * &vd)
        .collect();
    let traj = Trajectory::new(grid.times(), states);
    traj.check_invariants(false)?;
    Ok(traj)
}

/// Convenience wrapper taking a bath description.
pub fn tcl2_evolve_bath(
    system: &SystemSpec,
    bath: &BathSpec,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    opts: Tcl2Options,
) -> Result<Trajectory> {
    tcl2_evolve(system, bath, rho0, grid, opts)
}

/// One Lindblad channel of the secular generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SecularChannel {
    /// Energy given to the bath (positive for emission).
    pub omega: f64,
    pub coupling: usize,
    pub op: Operator,
    pub rate: f64,
    pub shift: f64,
}

/// Secular Markov generator with Lamb-shift-corrected Hamiltonian.
#[derive(Clone, Debug, PartialEq)]
pub struct SecularGenerator {
    pub lindblad: LindbladSpec,
    pub lamb_shift: Operator,
    pub channels: Vec<SecularChannel>,
    pub energies: Vec<f64>,
}

impl SecularGenerator {
    /// Rate `γ̃(ω)` of the channel with Bohr frequency `ω`, if present.
    pub fn rate_at(&self, omega: f64) -> Option<f64> {
        self.channels
            .iter()
            .filter(|c| (c.omega - omega).abs() < 1e-9)
            .map(|c| c.rate)
            .reduce(|a, b| a + b)
    }
}

/// Real part of the half-sided transform of the bath kernel at Bohr frequency
/// `ω` (positive: emission `πJ(n+1)`, negative: absorption `πJn`).
pub fn secular_rate(bath: &BathSpec, omega: f64) -> Result<f64> {
    if omega == 0.0 {
        if bath.is_zero_temperature() {
            return Ok(0.0);
        }
        let e = 1e-7 * bath.j.support_max().min(1.0);
        let v = PI * bath.j.eval(e)? / (bath.beta * e);
        if !v.is_finite() {
            return Err(Error::Domain("zero-frequency dephasing rate diverges".into()));
        }
        return Ok(v);
    }
    let w = omega.abs();
    let jw = bath.j.eval(w)?;
    let n = bath.occupation(w);
    Ok(if omega > 0.0 { PI * jw * (n + 1.0) } else { PI * jw * n })
}

/// Principal value `P∫₀^W f(x)/(ω − x) dx`.
fn principal_value<F: Fn(f64) -> f64>(f: F, omega: f64, top: f64, width: f64) -> f64 {
    if omega <= 0.0 || omega >= top {
        return quad::real_integral(|x| f(x) / (omega - x), 0.0, top, width, true).0;
    }
    let fo = f(omega);
    let g = |x: f64| {
        let d = omega - x;
        if d.abs() < 1e-14 * omega {
            0.0
        } else {
            (f(x) - fo) / d
        }
    };
    let left = quad::real_integral(g, 0.0, omega, width, true).0;
    let right = quad::real_integral(g, omega, top, width, false).0;
    left + right + fo * (omega / (top - omega)).ln()
}

/// `(Im Γ⁻(ω), Im Γ⁺(ω))` with `Im Γ⁻ = P∫J(n+1)/(ω − x)` and `Im Γ⁺ = P∫Jn/(x − ω)`.
fn lamb_shifts(bath: &BathSpec, omega: f64) -> (f64, f64) {
    let jmax = bath.j.quadrature_max();
    let width = bath.j.support_max().min(jmax) / 64.0;
    let top = jmax.min(4000.0 * width);
    let jn = |x: f64| {
        if x <= 0.0 {
            (0.0, 0.0)
        } else {
            let j = bath.j.eval(x).unwrap_or(0.0);
            let n = bath.occupation(x);
            (j * (n + 1.0), j * n)
        }
    };
    let minus = principal_value(|x| jn(x).0, omega, top, width);
    let plus = if bath.is_zero_temperature() {
        0.0
    } else {
        -principal_value(|x| jn(x).1, omega, top, width)
    };
    (minus, plus)
}

/// Secular (Davies) generator: eigenoperators `L(ω) = Σ Π_m L Π_n` over pairs
/// with `ε_n − ε_m = ω`, rates `Re Γ(ω)` and Lamb shifts from principal values.
pub fn secular_markov_generator(system: &SystemSpec, bath: &BathSpec) -> Result<SecularGenerator> {
    if bath.statistics != crate::bath::Statistics::Bosonic {
        return Err(Error::Unsupported("fermionic bath".into()));
    }
    let d = system.dim();
    let (eps, v) = eigh(system.h.matrix());
    for k in 1..d {
        if eps[k] - eps[k - 1] <= 1e-8 {
            return Err(Error::SecularInapplicable(format!(
                "degenerate spectrum: levels {} and {k} differ by {:e}",
                k - 1,
                eps[k] - eps[k - 1]
            )));
        }
    }
    let mut gaps = Vec::new();
    for m in 0..d {
        for n in (m + 1)..d {
            gaps.push(eps[n] - eps[m]);
        }
    }
    gaps.sort_by(f64::total_cmp);
    if gaps.windows(2).any(|w| w[1] - w[0] <= 1e-8) {
        return Err(Error::SecularInapplicable(
            "Bohr frequencies are not pairwise distinct".into(),
        ));
    }
    let vd = v.adjoint();
    let mut channels = Vec::new();
    let mut h_ls = CMatrix::zeros(d, d);
    for (ci, lop) in system.couplings.iter().enumerate() {
        let le = &vd * lop.matrix() * &v;
        // Group matrix elements by ω = ε_n − ε_m (energy released by |n⟩ → |m⟩).
        let mut freqs: Vec<f64> = Vec::new();
        for m in 0..d {
            for n in 0..d {
                if le[(m, n)].norm() > 1e-14 {
                    let w = eps[n] - eps[m];
                    if !freqs.iter().any(|f| (f - w).abs() < 1e-9) {
                        freqs.push(w);
                    }
                }
            }
        }
        freqs.sort_by(f64::total_cmp);
        for &w in &freqs {
            let mut piece = CMatrix::zeros(d, d);
            for m in 0..d {
                for n in 0..d {
                    if ((eps[n] - eps[m]) - w).abs() < 1e-9 {
                        piece[(m, n)] = le[(m, n)];
                    }
                }
            }
            let lw = &v * &piece * &vd;
            // L(ω) is fed by α⁻ (emission), L(ω)† by α⁺ (absorption). Only
            // ω ≥ 0 carries rate; every ω ≠ 0 contributes a Lamb shift.
            let (rate_m, rate_p) = if w > 0.0 {
                (secular_rate(bath, w)?, secular_rate(bath, -w)?)
            } else if w == 0.0 {
                let r = secular_rate(bath, 0.0)?;
                (r, r)
            } else {
                (0.0, 0.0)
            };
            let (shift_m, shift_p) = if w == 0.0 { (0.0, 0.0) } else { lamb_shifts(bath, w) };
            for (op, omega, rate, shift) in [
                (lw.clone(), w, rate_m, shift_m),
                (lw.adjoint(), -w, rate_p, shift_p),
            ] {
                if rate == 0.0 && shift == 0.0 {
                    continue;
                }
                h_ls += op.adjoint() * &op * re(shift);
                channels.push(SecularChannel {
                    omega,
                    coupling: ci,
                    op: Operator::new(op)?,
                    rate,
                    shift,
                });
            }
        }
    }
    let h_ls = (&h_ls + h_ls.adjoint()) * re(0.5);
    let h_hat = Operator::new(system.h.matrix() + &h_ls)?;
    let ops: Vec<Operator> = channels.iter().map(|c| c.op.clone()).collect();
    let rates: Vec<f64> = channels.iter().map(|c| c.rate).collect();
    let lindblad = LindbladSpec::new(SystemSpec::new(h_hat, ops)?, rates)?;
    Ok(SecularGenerator {
        lindblad,
        lamb_shift: Operator::new(h_ls)?,
        channels,
        energies: eps,
    })
}

/// `e^{−βH}/Z`.
pub fn gibbs_state(h: &Operator, beta: f64) -> DensityMatrix {
    let (eps, v) = eigh(h.matrix());
    let e0 = eps[0];
    let w: Vec<f64> = eps
        .iter()
        .map(|&e| if beta.is_infinite() { if e == e0 { 1.0 } else { 0.0 } } else { (-beta * (e - e0)).exp() })
        .collect();
    let z: f64 = w.iter().sum();
    let diag = nalgebra::DVector::from_iterator(w.len(), w.iter().map(|&x| re(x / z)));
    DensityMatrix::new_unchecked(&v * CMatrix::from_diagonal(&diag) * v.adjoint())
}

/// `⟨A(t1) B(t2)⟩ = Tr{A Λ(t1, t2)[B ρ(t2)]}` for Markovian dynamics.
pub fn qrt_two_time(
    spec: &LindbladSpec,
    a: &Operator,
    b: &Operator,
    rho0: &DensityMatrix,
    t2: f64,
    t1: f64,
    dt: f64,
) -> Result<C64> {
    if t1 < t2 {
        return Err(Error::Domain(format!("need t1 >= t2, got t1 = {t1}, t2 = {t2}")));
    }
    check_dims(spec.system.dim(), rho0)?;
    let g = spec.generator();
    let evolve = |x: &CMatrix, span: f64| -> Result<CMatrix> {
        if span <= 0.0 {
            return Ok(x.clone());
        }
        let grid = TimeGrid::from_t_max(span, dt)?;
        Ok(propagate_constant(&g, x, &grid)?.pop().unwrap())
    };
    let rho_t2 = evolve(rho0.matrix(), t2)?;
    let x = evolve(&(b.matrix() * rho_t2), t1 - t2)?;
    Ok((a.matrix() * x).trace())
}

/// NIBA memory kernel `f(s) = Δ0² cos(Q1/π) e^{−Q2/π}`.
pub fn niba_kernel(delta0: f64, j: &crate::bath::SpectralDensity, beta: f64, s: f64) -> Result<f64> {
    if s == 0.0 {
        return Ok(delta0 * delta0);
    }
    let (q1, q2) = niba_q(j, beta, s)?;
    Ok(delta0 * delta0 * (q1 / PI).cos() * (-q2 / PI).exp())
}

fn niba_q(j: &crate::bath::SpectralDensity, beta: f64, s: f64) -> Result<(f64, f64)> {
    // J/ω³ tails beyond a few hundred feature widths are negligible here.
    let top = j.quadrature_max().min(400.0 * j.feature_width());
    let width = 0.5 * PI / s.abs();
    let (q1, r1) = j.integrate_weighted_with(|w| if w == 0.0 { 0.0 } else { (w * s).sin() / (w * w) }, width, top);
    let (q2, r2) = j.integrate_weighted_with(
        |w| {
            if w == 0.0 {
                return 0.0;
            }
            let coth = if beta.is_infinite() { 1.0 } else { 1.0 / (0.5 * beta * w).tanh() };
            2.0 * (0.5 * w * s).sin().powi(2) * coth / (w * w)
        },
        width,
        top,
    );
    let res = r1.max(r2);
    if !q1.is_finite() || !q2.is_finite() || res > 1e-6 * (q1.abs() + q2.abs()).max(1e-12) {
        return Err(Error::Quadrature {
            residual: res,
            context: format!("NIBA Q integrals at s = {s} (check convergence of J/omega^2)"),
        });
    }
    Ok((q1, q2))
}

pub fn niba_evolve(
    delta0: f64,
    j: &crate::bath::SpectralDensity,
    beta: f64,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::Domain("beta must be positive".into()));
    }
    let kernel: Vec<C64> = (0..grid.len())
        .map(|k| niba_kernel(delta0, j, beta, k as f64 * grid.dt).map(re))
        .collect::<Result<_>>()?;
    Ok(crate::exact::volterra(&kernel, 0.0, grid.dt)?.0.iter().map(|z| z.re).collect())
}

pub type OpFn = Arc<dyn Fn(f64) -> CMatrix + Send + Sync>;
pub type RateFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct TimeLocalChannel {
    pub op: OpFn,
    pub rate: RateFn,
}

impl TimeLocalChannel {
    pub fn constant(op: &Operator, rate: f64) -> Self {
        let m = op.matrix().clone();
        Self {
            op: Arc::new(move |_| m.clone()),
            rate: Arc::new(move |_| rate),
        }
    }
}

/// Canonical time-local generator with possibly negative rates `Δ_k(t)`.
#[derive(Clone)]
pub struct TimeLocalSpec {
    pub system: SystemSpec,
    /// Overrides `system.h` when present.
    pub hamiltonian: Option<OpFn>,
    pub channels: Vec<TimeLocalChannel>,
}

impl TimeLocalSpec {
    pub fn from_lindblad(spec: &LindbladSpec) -> Self {
        let channels = spec
            .system
            .couplings
            .iter()
            .zip(&spec.rates)
            .map(|(op, &r)| TimeLocalChannel::constant(op, r))
            .collect();
        Self {
            system: spec.system.clone(),
            hamiltonian: None,
            channels,
        }
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn hamiltonian_at(&self, t: f64) -> CMatrix {
        match &self.hamiltonian {
            Some(f) => f(t),
            None => self.system.h.matrix().clone(),
        }
    }

    /// `dρ/dt` at time `t`.
    pub fn apply(&self, t: f64, rho: &CMatrix) -> CMatrix {
        let h = self.hamiltonian_at(t);
        let mut out = (&h * rho - rho * &h) * (-I);
        for ch in &self.channels {
            let r = (ch.rate)(t);
            if r == 0.0 {
                continue;
            }
            let c = (ch.op)(t);
            let cd = c.adjoint();
            let cdc = &cd * &c;
            out += ((&c * rho * &cd) * re(2.0) - &cdc * rho - rho * &cdc) * re(r);
        }
        out
    }

    fn norm_at(&self, t: f64) -> f64 {
        let mut n = 2.0 * norm1(&self.hamiltonian_at(t));
        for ch in &self.channels {
            let c = (ch.op)(t);
            n += 4.0 * (ch.rate)(t).abs() * norm1(&c) * norm1(&c.adjoint());
        }
        n
    }
}

/// RK4 propagation of the canonical time-local equation. Positivity is not
/// asserted because negative rates may legitimately break it.
pub fn time_local_evolve(spec: &TimeLocalSpec, rho0: &DensityMatrix, grid: &TimeGrid) -> Result<Trajectory> {
    time_local_evolve_with(spec, rho0, grid, 0)
}

/// As [`time_local_evolve`] with an explicit substep count (0 picks one from the generator norm).
pub fn time_local_evolve_with(
    spec: &TimeLocalSpec,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<Trajectory> {
    check_dims(spec.dim(), rho0)?;
    let d = spec.dim();
    let sub = if substeps > 0 {
        substeps
    } else {
        let norm = (0..grid.len())
            .step_by((grid.len() / 64).max(1))
            .map(|k| spec.norm_at(grid.t(k)))
            .fold(0.0, f64::max);
        substeps_for(norm, grid.dt, 0.02)
    };
    let states = integrate(
        |t, y, dy| {
            let rho = unvec_slice(y, d);
            dy.copy_from_slice(spec.apply(t, &rho).as_slice());
        },
        vec(rho0.matrix()).as_slice(),
        grid,
        sub,
    )?;
    let traj = Trajectory::new(grid.times(), states.iter().map(|y| unvec_slice(y, d)).collect());
    traj.check_invariants(false)?;
    Ok(traj)
}

/// `½‖ρ₁ − ρ₂‖₁` for Hermitian inputs.
#[cfg(test)]
pub(crate) fn hermitian_trace_distance(a: &CMatrix, b: &CMatrix) -> f64 {
    0.5 * crate::linalg::trace_norm_hermitian(&(a - b))
}
