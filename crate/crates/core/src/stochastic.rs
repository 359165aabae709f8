//! Stochastic unravelings and ensemble averaging.
//!
//! * hierarchy of pure states (linear and nonlinear) for a single
//!   exponential kernel `α(t) = g e^{−Ωt}`,
//! * the stochastic Liouville equation with two correlated noises,
//! * non-Markovian quantum jumps over a shared ensemble of state classes.
//!
//! Every trajectory draws from its own `(seed, index)` stream, and block sums
//! are reduced in index order, so ensembles are bit-identical for any number
//! of worker threads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bath::{CorrelationSum, NoiseGenerator, SlnNoiseGenerator};
use crate::error::{Error, Result};
use crate::linalg::{
    all_finite, c, norm1, re, substeps_for, trace_norm_hermitian, CMatrix, CVector, DensityMatrix, Operator, Rk4,
    TimeGrid, Trajectory, C64, I, ONE, ZERO,
};
use crate::mastereq::TimeLocalSpec;
use crate::rng;

/// Norm beyond which a trajectory is declared invalid.
pub const EXPLOSION_NORM: f64 = 1e6;
/// Largest tolerated fraction of invalid trajectories.
pub const MAX_INVALID_FRACTION: f64 = 0.01;
/// Classes whose infidelity is below this are merged.
pub const MERGE_TOLERANCE: f64 = 1e-10;

const BLOCK: usize = 128;

/// One trajectory's contribution: an operator per grid time, or a flag.
#[derive(Clone, Debug)]
pub enum Sample {
    Valid(Vec<CMatrix>),
    Invalid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult {
    pub times: Vec<f64>,
    /// Hermitian part of the sample mean.
    pub mean: Vec<CMatrix>,
    /// Standard error of the mean in trace distance units, `‖E‖_F/√2`.
    pub stderr: Vec<f64>,
    pub n_traj: usize,
    pub n_invalid: usize,
}

impl EnsembleResult {
    pub fn trajectory(&self) -> Trajectory {
        Trajectory::new(self.times.clone(), self.mean.clone())
    }

    /// Trace distance to a reference at every time.
    pub fn distance_to(&self, reference: &[CMatrix]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(reference)
            .map(|(a, b)| 0.5 * trace_norm_hermitian(&(a - b)))
            .collect()
    }

    /// Worst excess of the distance over `max(floor, k·stderr)`; negative means inside.
    pub fn worst_excess(&self, reference: &[CMatrix], floor: f64, k: f64) -> f64 {
        self.distance_to(reference)
            .iter()
            .zip(&self.stderr)
            .map(|(d, s)| d - floor.max(k * s))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

struct Partial {
    sum: Vec<CMatrix>,
    sq: Vec<f64>,
    valid: usize,
    invalid: usize,
}

impl Partial {
    fn empty() -> Self {
        Self {
            sum: Vec::new(),
            sq: Vec::new(),
            valid: 0,
            invalid: 0,
        }
    }

    fn add(&mut self, xs: &[CMatrix]) {
        if self.sum.is_empty() {
            self.sum = xs.iter().map(|x| CMatrix::zeros(x.nrows(), x.ncols())).collect();
            self.sq = vec![0.0; xs.len()];
        }
        for ((s, q), x) in self.sum.iter_mut().zip(self.sq.iter_mut()).zip(xs) {
            *s += x;
            *q += x.norm_squared();
        }
        self.valid += 1;
    }

    fn merge(&mut self, other: Partial) {
        self.invalid += other.invalid;
        if other.valid == 0 {
            return;
        }
        if self.sum.is_empty() {
            self.sum = other.sum;
            self.sq = other.sq;
        } else {
            for (s, o) in self.sum.iter_mut().zip(&other.sum) {
                *s += o;
            }
            for (q, o) in self.sq.iter_mut().zip(&other.sq) {
                *q += o;
            }
        }
        self.valid += other.valid;
    }
}

/// Averages `n_traj` samples produced by `sample(index)`. Hard errors abort;
/// invalid samples are counted and the ensemble is rejected above 1%.
pub fn ensemble_average<F>(times: &[f64], n_traj: usize, sample: F) -> Result<EnsembleResult>
where
    F: Fn(u64) -> Result<Sample> + Sync,
{
    if n_traj < 2 {
        return Err(Error::Domain(format!("need at least 2 trajectories, got {n_traj}")));
    }
    let n_blocks = n_traj.div_ceil(BLOCK);
    let blocks: Vec<Result<Partial>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut p = Partial::empty();
            for idx in b * BLOCK..((b + 1) * BLOCK).min(n_traj) {
                match sample(idx as u64)? {
                    Sample::Valid(xs) => {
                        if xs.len() != times.len() {
                            return Err(Error::Dimension(format!(
                                "sample has {} times, grid has {}",
                                xs.len(),
                                times.len()
                            )));
                        }
                        p.add(&xs)
                    }
                    Sample::Invalid => p.invalid += 1,
                }
            }
            Ok(p)
        })
        .collect();
    let mut total = Partial::empty();
    for b in blocks {
        total.merge(b?);
    }
    if total.invalid as f64 > MAX_INVALID_FRACTION * n_traj as f64 || total.valid < 2 {
        return Err(Error::TooManyInvalid {
            invalid: total.invalid,
            total: n_traj,
        });
    }
    let n = total.valid as f64;
    let mut mean = Vec::with_capacity(times.len());
    let mut stderr = Vec::with_capacity(times.len());
    for (s, q) in total.sum.iter().zip(&total.sq) {
        let m = s / re(n);
        let spread = (q - m.norm_squared() * n).max(0.0);
        stderr.push((spread / (n * (n - 1.0))).sqrt() / std::f64::consts::SQRT_2);
        mean.push((&m + m.adjoint()) * re(0.5));
    }
    Ok(EnsembleResult {
        times: times.to_vec(),
        mean,
        stderr,
        n_traj,
        n_invalid: total.invalid,
    })
}

/// `out += s·M x` for a square `M`.
fn matvec_add(m: &CMatrix, x: &[C64], s: C64, out: &mut [C64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = ZERO;
        for (j, xj) in x.iter().enumerate() {
            acc += m[(i, j)] * xj;
        }
        *o += acc * s;
    }
}

fn projector(psi: &CVector) -> CMatrix {
    psi * psi.adjoint()
}

fn check_vector(psi0: &[C64], dim: usize) -> Result<CVector> {
    if psi0.len() != dim {
        return Err(Error::Dimension(format!("state has length {}, system has dim {dim}", psi0.len())));
    }
    let v = CVector::from_column_slice(psi0);
    let n = v.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidState("initial state must have finite nonzero norm".into()));
    }
    Ok(v)
}

/// Hierarchy-of-pure-states problem for one coupling `L` and `α(t) = g e^{−Ωt}`:
///
/// ```text
/// ∂ψ_k = (−iH − kΩ + L z̃*_t) ψ_k + k g L ψ_{k−1} − (L† − ⟨L†⟩) ψ_{k+1}
/// ```
///
/// closed by `ψ_{K+1} = (g/Ω) L ψ_K`. The linear form has `z̃ = z` and no
/// `⟨L†⟩`; the nonlinear form shifts the noise by `∫ α*(t−s)⟨L†⟩_s ds`.
pub struct Hops {
    h: CMatrix,
    l: CMatrix,
    ld: CMatrix,
    /// `L†L`
    ldl: CMatrix,
    g: C64,
    omega: C64,
    k_max: usize,
    grid: TimeGrid,
    substeps: usize,
    noise: NoiseGenerator,
    seed: u64,
}

impl Hops {
    pub fn new(
        h: &Operator,
        l: &Operator,
        expansion: &CorrelationSum,
        grid: &TimeGrid,
        k_max: usize,
        seed: u64,
    ) -> Result<Self> {
        if expansion.len() != 1 {
            return Err(Error::Unsupported(format!(
                "hierarchy of pure states needs a single exponential, got {} terms",
                expansion.len()
            )));
        }
        if k_max < 1 {
            return Err(Error::Domain("k_max must be at least 1".into()));
        }
        if h.dim() != l.dim() {
            return Err(Error::Dimension("Hamiltonian and coupling differ in dimension".into()));
        }
        let term = expansion.terms()[0];
        let norm = norm1(h.matrix())
            + k_max as f64 * term.mu.norm()
            + (k_max as f64 * term.c.norm() + 1.0 + term.c.norm().sqrt() * 3.0) * norm1(l.matrix());
        let substeps = substeps_for(norm, grid.dt, 0.1);
        let n_noise = 2 * substeps * grid.n_steps + 1;
        let noise = NoiseGenerator::new(|t| expansion.eval(t), n_noise, grid.dt / (2 * substeps) as f64)?;
        Ok(Self {
            h: h.matrix().clone(),
            l: l.matrix().clone(),
            ld: l.matrix().adjoint(),
            ldl: l.matrix().adjoint() * l.matrix(),
            g: term.c,
            omega: term.mu,
            k_max,
            grid: *grid,
            substeps,
            noise,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// Linear trajectory `ψ_0(t)`, unnormalized; `None` when it blows up.
    pub fn linear(&self, psi0: &[C64], index: u64) -> Result<Option<Vec<CVector>>> {
        self.run(psi0, index, false)
    }

    /// Normalized nonlinear trajectory; `None` when it blows up.
    pub fn nonlinear(&self, psi0: &[C64], index: u64) -> Result<Option<Vec<CVector>>> {
        self.run(psi0, index, true)
    }

    fn run(&self, psi0: &[C64], index: u64, nonlinear: bool) -> Result<Option<Vec<CVector>>> {
        let d = self.dim();
        let mut v0 = check_vector(psi0, d)?;
        if nonlinear {
            v0 /= re(v0.norm());
        }
        let z = self.noise.sample(self.seed, index);
        let levels = self.k_max + 1;
        // layout: levels·d amplitudes followed by the memory shift
        let n = levels * d + 1;
        let mut y = vec![ZERO; n];
        y[..d].copy_from_slice(v0.as_slice());
        let hstep = self.grid.dt / self.substeps as f64;
        let term = self.g / self.omega;
        let mut rhs = |t: f64, y: &[C64], dy: &mut [C64]| {
            let pos = (t - self.grid.t0) / (0.5 * hstep);
            let zc = z[(pos.round() as usize).min(z.len() - 1)].conj();
            let psi = &y[..d];
            let (shift, mean_ld) = if nonlinear {
                let nn: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
                let m = if nn > 0.0 {
                    (0..d).map(|i| psi[i].conj() * (0..d).map(|j| self.ld[(i, j)] * psi[j]).sum::<C64>()).sum::<C64>() / nn
                } else {
                    ZERO
                };
                (y[n - 1], m)
            } else {
                (ZERO, ZERO)
            };
            let noise = zc + shift;
            for k in 0..levels {
                let pk = &y[k * d..(k + 1) * d];
                let out = &mut dy[k * d..(k + 1) * d];
                let decay = -(k as f64) * self.omega;
                for (o, p) in out.iter_mut().zip(pk) {
                    *o = p * decay;
                }
                matvec_add(&self.h, pk, -I, out);
                matvec_add(&self.l, pk, noise, out);
                if k > 0 {
                    matvec_add(&self.l, &y[(k - 1) * d..k * d], self.g * k as f64, out);
                }
                if k + 1 < levels {
                    let next = &y[(k + 1) * d..(k + 2) * d];
                    matvec_add(&self.ld, next, -ONE, out);
                    for (o, x) in out.iter_mut().zip(next) {
                        *o += x * mean_ld;
                    }
                } else {
                    // closure ψ_{K+1} = (g/Ω) L ψ_K
                    matvec_add(&self.ldl, pk, -term, out);
                    matvec_add(&self.l, pk, term * mean_ld, out);
                }
            }
            dy[n - 1] = if nonlinear {
                self.g.conj() * mean_ld - self.omega.conj() * y[n - 1]
            } else {
                ZERO
            };
        };
        let mut stepper = Rk4::new(n);
        let mut out = Vec::with_capacity(self.grid.len());
        out.push(CVector::from_column_slice(&y[..d]));
        for k in 0..self.grid.n_steps {
            let t = self.grid.t(k);
            for s in 0..self.substeps {
                stepper.step(&mut rhs, t + s as f64 * hstep, hstep, &mut y);
            }
            if !all_finite(&y) {
                return Ok(None);
            }
            let norm = y[..n - 1].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if norm > EXPLOSION_NORM {
                return Ok(None);
            }
            if nonlinear {
                let n0 = y[..d].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                if !(n0 > 0.0) {
                    return Ok(None);
                }
                for a in &mut y[..n - 1] {
                    *a /= n0;
                }
            }
            out.push(CVector::from_column_slice(&y[..d]));
        }
        Ok(Some(out))
    }

    /// Ensemble of `|ψ⟩⟨ψ|` over `n_traj` trajectories.
    pub fn ensemble(&self, psi0: &[C64], n_traj: usize, nonlinear: bool) -> Result<EnsembleResult> {
        ensemble_average(&self.grid.times(), n_traj, |idx| {
            Ok(match self.run(psi0, idx, nonlinear)? {
                Some(states) => Sample::Valid(states.iter().map(projector).collect()),
                None => Sample::Invalid,
            })
        })
    }
}

/// One linear hierarchy trajectory `ψ_0(t)`; `None` marks an invalid run.
#[allow(clippy::too_many_arguments)]
pub fn hops_linear_trajectory(
    h: &Operator,
    l: &Operator,
    expansion: &CorrelationSum,
    psi0: &[C64],
    grid: &TimeGrid,
    k_max: usize,
    seed: u64,
    index: u64,
) -> Result<Option<Vec<CVector>>> {
    Hops::new(h, l, expansion, grid, k_max, seed)?.linear(psi0, index)
}

/// One normalized nonlinear hierarchy trajectory; `None` marks an invalid run.
#[allow(clippy::too_many_arguments)]
pub fn hops_nonlinear_trajectory(
    h: &Operator,
    l: &Operator,
    expansion: &CorrelationSum,
    psi0: &[C64],
    grid: &TimeGrid,
    k_max: usize,
    seed: u64,
    index: u64,
) -> Result<Option<Vec<CVector>>> {
    Hops::new(h, l, expansion, grid, k_max, seed)?.nonlinear(psi0, index)
}

/// Stochastic Liouville equation
/// `dP/dt = −i[H, P] + iξ(t)[q, P] + (i/2)ν(t){q, P}`,
/// with noises held constant over each fine step.
pub struct Sln {
    h: CMatrix,
    q: CMatrix,
    noise: SlnNoiseGenerator,
    grid: TimeGrid,
    substeps: usize,
    seed: u64,
}

impl Sln {
    pub fn new<FR, FI>(h: &Operator, q: &Operator, alpha_r: FR, alpha_i: FI, grid: &TimeGrid, seed: u64) -> Result<Self>
    where
        FR: Fn(f64) -> f64,
        FI: Fn(f64) -> f64,
    {
        if !q.is_hermitian(1e-10) {
            return Err(Error::Domain("SLN coupling must be Hermitian".into()));
        }
        if h.dim() != q.dim() {
            return Err(Error::Dimension("Hamiltonian and coupling differ in dimension".into()));
        }
        let a0 = alpha_r(0.0).abs();
        let norm = 2.0 * norm1(h.matrix()) + 4.0 * a0.sqrt() * norm1(q.matrix());
        let substeps = substeps_for(norm, grid.dt, 0.05);
        let fine = grid.refined(substeps);
        let noise = SlnNoiseGenerator::new(alpha_r, alpha_i, &fine)?;
        Ok(Self {
            h: h.matrix().clone(),
            q: q.matrix().clone(),
            noise,
            grid: *grid,
            substeps,
            seed,
        })
    }

    pub fn intensity(&self) -> f64 {
        self.noise.intensity()
    }

    /// Samples `P(t)` on the output grid; `None` when the sample blows up.
    pub fn trajectory(&self, rho0: &CMatrix, index: u64) -> Result<Option<Vec<CMatrix>>> {
        let d = self.h.nrows();
        if rho0.nrows() != d || rho0.ncols() != d {
            return Err(Error::Dimension("initial operator has the wrong shape".into()));
        }
        let (xi, nu) = self.noise.sample(self.seed, index);
        let hstep = self.grid.dt / self.substeps as f64;
        let mut p = rho0.clone();
        let mut out = Vec::with_capacity(self.grid.len());
        out.push(p.clone());
        let mut j = 0;
        for _ in 0..self.grid.n_steps {
            for _ in 0..self.substeps {
                let x = (xi[j] + xi[j + 1]) * 0.5;
                let v = nu[j];
                // dP = −i(K P − P K') with K = H − ξq − νq/2, K' = H − ξq + νq/2
                let k = &self.h - &self.q * (x + v * 0.5);
                let kp = &self.h - &self.q * (x - v * 0.5);
                let f = |p: &CMatrix| (&k * p - p * &kp) * (-I);
                let k1 = f(&p);
                let k2 = f(&(&p + &k1 * re(0.5 * hstep)));
                let k3 = f(&(&p + &k2 * re(0.5 * hstep)));
                let k4 = f(&(&p + &k3 * re(hstep)));
                p += (k1 + (k2 + k3) * re(2.0) + k4) * re(hstep / 6.0);
                j += 1;
            }
            if !all_finite(p.as_slice()) || p.norm() > EXPLOSION_NORM {
                return Ok(None);
            }
            out.push(p.clone());
        }
        Ok(Some(out))
    }

    pub fn ensemble(&self, rho0: &DensityMatrix, n_traj: usize) -> Result<EnsembleResult> {
        ensemble_average(&self.grid.times(), n_traj, |idx| {
            Ok(match self.trajectory(rho0.matrix(), idx)? {
                Some(states) => Sample::Valid(states),
                None => Sample::Invalid,
            })
        })
    }
}

/// One SLN sample `P(t)`; `None` marks an invalid run.
#[allow(clippy::too_many_arguments)]
pub fn sln_trajectory<FR, FI>(
    h: &Operator,
    q: &Operator,
    alpha_r: FR,
    alpha_i: FI,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    seed: u64,
    index: u64,
) -> Result<Option<Vec<CMatrix>>>
where
    FR: Fn(f64) -> f64,
    FI: Fn(f64) -> f64,
{
    Sln::new(h, q, alpha_r, alpha_i, grid, seed)?.trajectory(rho0.matrix(), index)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpRecord {
    pub time: f64,
    pub member: usize,
    pub channel: usize,
    pub forward: bool,
}

/// Final classes and the full jump history of a quantum-jump ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpEnsemble {
    pub states: Vec<CVector>,
    pub counts: Vec<usize>,
    pub jumps: Vec<JumpRecord>,
    /// Number of occupied classes after each step.
    pub classes_per_step: Vec<usize>,
}

impl JumpEnsemble {
    /// Time of each member's first jump; members that never jumped are absent.
    pub fn first_jump_times(&self) -> Vec<f64> {
        let mut first: std::collections::BTreeMap<usize, f64> = Default::default();
        for j in &self.jumps {
            first.entry(j.member).or_insert(j.time);
        }
        first.into_values().collect()
    }
}

#[derive(Clone, Debug)]
pub struct NmqjResult {
    pub ensemble: EnsembleResult,
    pub history: JumpEnsemble,
}

struct Class {
    psi: CVector,
    count: usize,
}

fn infidelity(a: &CVector, b: &CVector) -> f64 {
    1.0 - a.dotc(b).norm_sqr()
}

fn find_or_insert(classes: &mut Vec<Class>, psi: CVector) -> usize {
    if let Some(i) = classes.iter().position(|c| infidelity(&c.psi, &psi) < MERGE_TOLERANCE) {
        return i;
    }
    classes.push(Class { psi, count: 0 });
    classes.len() - 1
}

#[derive(Clone, Copy)]
enum Event {
    Forward { channel: usize, target: usize },
    Backward { channel: usize, source: usize },
}

/// Non-Markovian quantum jumps for `dρ/dt = −i[H, ρ] + Σ Δ_k(t)(2CρC† − {C†C, ρ})`.
///
/// Each class evolves under `H − iΣΔ_k C†C` and is renormalized. A member in
/// class α jumps forward with `P = 2Δ_k δt ‖C ψ_α‖²` when `Δ_k > 0`, and
/// back to a source α′ with `C ψ_α′ ∝ ψ_α` with
/// `P = (N_α′/N_α) 2|Δ_k| δt ‖C ψ_α′‖²` when `Δ_k < 0`.
pub fn nmqj_evolve(spec: &TimeLocalSpec, psi0: &[C64], grid: &TimeGrid, n: usize, seed: u64) -> Result<NmqjResult> {
    let d = spec.dim();
    if n < 2 {
        return Err(Error::Domain(format!("ensemble needs at least 2 members, got {n}")));
    }
    let mut v0 = check_vector(psi0, d)?;
    v0 /= re(v0.norm());
    let mut classes = vec![Class { psi: v0, count: n }];
    let mut member_class = vec![0usize; n];
    let mut streams: Vec<ChaCha8Rng> = (0..n as u64).map(|m| rng::stream(seed, m)).collect();
    let mut jumps = Vec::new();
    let mut classes_per_step = vec![1];
    let times = grid.times();
    let mut mean = vec![class_mean(&classes, n)];
    let mut stderr = vec![class_stderr(&classes, &mean[0], n)];
    let n_ch = spec.channels.len();

    for step in 0..grid.n_steps {
        let t = grid.t(step);
        let dt = grid.dt;
        let ops: Vec<CMatrix> = spec.channels.iter().map(|ch| (ch.op)(t)).collect();
        let rates: Vec<f64> = spec.channels.iter().map(|ch| (ch.rate)(t)).collect();

        // event tables per occupied class
        let n_before = classes.len();
        let mut events: Vec<Vec<(Event, f64)>> = vec![Vec::new(); n_before];
        for a in 0..n_before {
            if classes[a].count == 0 {
                continue;
            }
            for k in 0..n_ch {
                let r = rates[k];
                if r > 0.0 {
                    let phi = &ops[k] * &classes[a].psi;
                    let w = phi.norm_squared();
                    if w > 0.0 {
                        let target = find_or_insert(&mut classes, &phi / re(w.sqrt()));
                        events[a].push((Event::Forward { channel: k, target }, 2.0 * r * dt * w));
                    }
                } else if r < 0.0 {
                    let mut candidates = 0;
                    for b in 0..n_before {
                        let phi = &ops[k] * &classes[b].psi;
                        let w = phi.norm_squared();
                        if w <= 0.0 || infidelity(&(&phi / re(w.sqrt())), &classes[a].psi) >= MERGE_TOLERANCE {
                            continue;
                        }
                        candidates += 1;
                        if classes[b].count > 0 {
                            let p = classes[b].count as f64 / classes[a].count as f64 * 2.0 * r.abs() * dt * w;
                            events[a].push((Event::Backward { channel: k, source: b }, p));
                        }
                    }
                    if candidates > 0 && !events[a].iter().any(|(e, _)| matches!(e, Event::Backward { channel, .. } if *channel == k)) {
                        return Err(Error::PositivityViolation {
                            time: t,
                            reason: format!("channel {k} needs a backward jump into an empty source class"),
                        });
                    }
                }
            }
            let total: f64 = events[a].iter().map(|(_, p)| p).sum();
            if total > 1.0 {
                return Err(Error::Numerical(format!(
                    "jump probability {total:.3} exceeds one at t = {t}; reduce the time step"
                )));
            }
        }

        // per-member draws, independent of thread layout
        let decisions: Vec<Option<Event>> = streams
            .par_iter_mut()
            .zip(member_class.par_iter())
            .map(|(r, &a)| {
                let u: f64 = r.random();
                let mut acc = 0.0;
                for (e, p) in &events[a] {
                    acc += p;
                    if u < acc {
                        return Some(*e);
                    }
                }
                None
            })
            .collect();
        for (m, dec) in decisions.into_iter().enumerate() {
            let Some(e) = dec else { continue };
            let a = member_class[m];
            let (dest, channel, forward) = match e {
                Event::Forward { channel, target } => (target, channel, true),
                Event::Backward { channel, source } => (source, channel, false),
            };
            classes[a].count -= 1;
            classes[dest].count += 1;
            member_class[m] = dest;
            jumps.push(JumpRecord {
                time: t + dt,
                member: m,
                channel,
                forward,
            });
        }

        // deterministic drift of every class over the step
        for cl in classes.iter_mut() {
            cl.psi = drift(spec, &cl.psi, t, dt)?;
        }
        compact(&mut classes, &mut member_class, &ops);
        let total: usize = classes.iter().map(|c| c.count).sum();
        if total != n {
            return Err(Error::Numerical(format!("ensemble lost members: {total} of {n}")));
        }
        classes_per_step.push(classes.iter().filter(|c| c.count > 0).count());
        let m = class_mean(&classes, n);
        stderr.push(class_stderr(&classes, &m, n));
        mean.push(m);
    }
    let (states, counts) = classes.into_iter().map(|c| (c.psi, c.count)).unzip();
    Ok(NmqjResult {
        ensemble: EnsembleResult {
            times,
            mean,
            stderr,
            n_traj: n,
            n_invalid: 0,
        },
        history: JumpEnsemble {
            states,
            counts,
            jumps,
            classes_per_step,
        },
    })
}

fn drift(spec: &TimeLocalSpec, psi: &CVector, t: f64, dt: f64) -> Result<CVector> {
    let heff = |t: f64| {
        let mut h = spec.hamiltonian_at(t);
        for ch in &spec.channels {
            let r = (ch.rate)(t);
            if r != 0.0 {
                let op = (ch.op)(t);
                h -= (op.adjoint() * &op) * c(0.0, r);
            }
        }
        h
    };
    let norm = norm1(&heff(t)).max(norm1(&heff(t + dt)));
    let sub = substeps_for(norm, dt, 0.05);
    let h = dt / sub as f64;
    let mut y = psi.clone();
    for s in 0..sub {
        let t0 = t + s as f64 * h;
        let (ha, hb, hc) = (heff(t0), heff(t0 + 0.5 * h), heff(t0 + h));
        let k1 = (&ha * &y) * (-I);
        let k2 = (&hb * (&y + &k1 * re(0.5 * h))) * (-I);
        let k3 = (&hb * (&y + &k2 * re(0.5 * h))) * (-I);
        let k4 = (&hc * (&y + &k3 * re(h))) * (-I);
        y += (k1 + (k2 + k3) * re(2.0) + k4) * re(h / 6.0);
    }
    let nn = y.norm();
    if !(nn > 0.0) || !nn.is_finite() {
        return Err(Error::NonFinite {
            step: (t / dt).round() as usize + 1,
            time: t + dt,
        });
    }
    Ok(y / re(nn))
}

/// Merges coinciding classes and drops empty ones that are no longer the
/// source of an occupied class.
fn compact(classes: &mut Vec<Class>, member_class: &mut [usize], ops: &[CMatrix]) {
    let mut remap: Vec<usize> = (0..classes.len()).collect();
    for i in 0..classes.len() {
        for j in 0..i {
            if remap[j] == j && infidelity(&classes[j].psi, &classes[i].psi) < MERGE_TOLERANCE {
                remap[i] = j;
                break;
            }
        }
    }
    let mut keep = vec![false; classes.len()];
    for i in 0..classes.len() {
        if remap[i] != i {
            let cnt = classes[i].count;
            classes[remap[i]].count += cnt;
            classes[i].count = 0;
        }
    }
    for i in 0..classes.len() {
        if remap[i] != i {
            continue;
        }
        keep[i] = classes[i].count > 0
            || ops.iter().any(|op| {
                let phi = op * &classes[i].psi;
                let w = phi.norm_squared();
                w > 0.0
                    && classes.iter().enumerate().any(|(j, other)| {
                        remap[j] == j
                            && other.count > 0
                            && infidelity(&(&phi / re(w.sqrt())), &other.psi) < MERGE_TOLERANCE
                    })
            });
    }
    let mut new_index = vec![usize::MAX; classes.len()];
    let mut next = 0;
    for i in 0..classes.len() {
        if keep[i] {
            new_index[i] = next;
            next += 1;
        }
    }
    for m in member_class.iter_mut() {
        *m = new_index[remap[*m]];
    }
    let mut i = 0;
    classes.retain(|_| {
        let k = keep[i];
        i += 1;
        k
    });
}

fn class_mean(classes: &[Class], n: usize) -> CMatrix {
    let d = classes[0].psi.len();
    let mut m = CMatrix::zeros(d, d);
    for cl in classes.iter().filter(|c| c.count > 0) {
        m += projector(&cl.psi) * re(cl.count as f64 / n as f64);
    }
    (&m + m.adjoint()) * re(0.5)
}

fn class_stderr(classes: &[Class], mean: &CMatrix, n: usize) -> f64 {
    let nf = n as f64;
    let spread: f64 = classes
        .iter()
        .filter(|c| c.count > 0)
        .map(|cl| cl.count as f64 * (projector(&cl.psi) - mean).norm_squared())
        .sum();
    (spread / (nf * (nf - 1.0))).sqrt() / std::f64::consts::SQRT_2
}

/// Kolmogorov-Smirnov p-value of `samples` against an exponential law of the given rate.
pub fn ks_exponential_p_value(samples: &[f64], rate: f64) -> f64 {
    let n = samples.len();
    if n == 0 {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let mut dmax: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = 1.0 - (-rate * x).exp();
        dmax = dmax.max((i as f64 + 1.0) / n as f64 - f).max(f - i as f64 / n as f64);
    }
    let sn = (n as f64).sqrt();
    kolmogorov_q((sn + 0.12 + 0.11 / sn) * dmax)
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{amplitude_damping_state, exact_tcl_rates, one_excitation_amplitude};
    use crate::mastereq::{lindblad_evolve, time_local_evolve, LindbladSpec, SystemSpec};

    fn plus_state() -> Vec<C64> {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        vec![re(s), re(s)]
    }

    #[test]
    fn zero_coupling_hops_is_unitary() {
        let h = Operator::sigma_x().scale(re(0.7));
        let l = Operator::zeros(2);
        let kern = CorrelationSum::single(re(0.5), re(1.0)).unwrap();
        let grid = TimeGrid::new(0.0, 0.05, 40).unwrap();
        let psi0 = vec![re(1.0), ZERO];
        let hops = Hops::new(&h, &l, &kern, &grid, 3, 1).unwrap();
        let lin = hops.linear(&psi0, 0).unwrap().unwrap();
        let nl = hops.nonlinear(&psi0, 0).unwrap().unwrap();
        for (k, (a, b)) in lin.iter().zip(&nl).enumerate() {
            let u = crate::linalg::unitary_propagator(h.matrix(), grid.t(k));
            let exact = &u * CVector::from_column_slice(&psi0);
            assert!((a - &exact).norm() < 1e-6);
            assert!((b - &exact).norm() < 1e-6);
        }
    }

    fn damping_reference(g: f64, omega: f64, grid: &TimeGrid, rho0: &CMatrix) -> Vec<CMatrix> {
        let sol = one_excitation_amplitude(|t| re(g * (-omega * t).exp()), grid).unwrap();
        sol.a.iter().map(|&u| amplitude_damping_state(u, rho0)).collect()
    }

    #[test]
    fn hops_matches_exact_amplitude_damping() {
        let (g, omega) = (1.0, 1.0);
        let grid = TimeGrid::from_t_max(10.0 / omega, 0.02).unwrap();
        let kern = CorrelationSum::single(re(g), re(omega)).unwrap();
        let psi0 = plus_state();
        let rho0 = projector(&CVector::from_column_slice(&psi0));
        let exact = damping_reference(g, omega, &grid, &rho0);
        let hops = Hops::new(&Operator::zeros(2), &Operator::sigma_minus(), &kern, &grid, 4, 11).unwrap();
        let lin = hops.ensemble(&psi0, 4000, false).unwrap();
        let nl = hops.ensemble(&psi0, 4000, true).unwrap();
        assert!(lin.worst_excess(&exact, 0.02, 3.0) <= 0.0);
        assert!(nl.worst_excess(&exact, 0.02, 3.0) <= 0.0);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&nl.stderr) <= mean(&lin.stderr));
        for (r, s) in lin.mean.iter().zip(&lin.stderr) {
            // |Tr A| ≤ √d‖A‖_F bounds the trace error by 2·stderr for d = 2
            assert!((r.trace().re - 1.0).abs() <= 3.0 * 2.0 * s + 1e-12);
        }
        for r in &nl.mean {
            assert!((r.trace().re - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_of_identical_samples_has_zero_error() {
        let x = CMatrix::from_row_slice(2, 2, &[re(0.3), c(0.1, 0.2), c(0.1, -0.2), re(0.7)]);
        let r = ensemble_average(&[0.0, 1.0], 10, |_| Ok(Sample::Valid(vec![x.clone(), x.clone()]))).unwrap();
        assert!(r.stderr.iter().all(|&s| s < 1e-15));
        assert!((&r.mean[1] - &x).norm() < 1e-15);
    }

    #[test]
    fn invalid_fraction_is_capped() {
        let x = CMatrix::identity(2, 2);
        let r = ensemble_average(&[0.0], 200, |i| {
            Ok(if i < 2 { Sample::Invalid } else { Sample::Valid(vec![x.clone()]) })
        })
        .unwrap();
        assert_eq!(r.n_invalid, 2);
        let e = ensemble_average(&[0.0], 200, |i| {
            Ok(if i < 3 { Sample::Invalid } else { Sample::Valid(vec![x.clone()]) })
        });
        assert!(matches!(e, Err(Error::TooManyInvalid { invalid: 3, total: 200 })));
    }

    #[test]
    fn stderr_scales_with_sqrt_n() {
        let (g, omega) = (1.0, 1.0);
        let grid = TimeGrid::from_t_max(4.0, 0.04).unwrap();
        let kern = CorrelationSum::single(re(g), re(omega)).unwrap();
        let hops = Hops::new(&Operator::zeros(2), &Operator::sigma_minus(), &kern, &grid, 3, 5).unwrap();
        let a = hops.ensemble(&plus_state(), 1000, false).unwrap();
        let b = hops.ensemble(&plus_state(), 4000, false).unwrap();
        let sa: f64 = a.stderr[1..].iter().sum();
        let sb: f64 = b.stderr[1..].iter().sum();
        let ratio = sb / sa;
        assert!((0.45..=0.55).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn sln_without_coupling_is_von_neumann() {
        let h = Operator::sigma_x().scale(re(0.5));
        let grid = TimeGrid::new(0.0, 0.05, 20).unwrap();
        let rho0 = DensityMatrix::basis(2, 0).unwrap();
        let p = sln_trajectory(&h, &Operator::zeros(2), |t| (-t).exp(), |t| -0.1 * (-t).exp(), &rho0, &grid, 3, 0)
            .unwrap()
            .unwrap();
        for (k, x) in p.iter().enumerate() {
            let u = crate::linalg::unitary_propagator(h.matrix(), grid.t(k));
            let exact = &u * rho0.matrix() * u.adjoint();
            assert!((x - &exact).norm() < 1e-6);
            assert!((x.trace() - re(1.0)).norm() < 1e-10);
        }
    }

    #[test]
    fn sln_mean_trace_is_one() {
        let h = Operator::sigma_x().scale(re(0.5));
        let grid = TimeGrid::from_t_max(2.0, 0.02).unwrap();
        let rho0 = DensityMatrix::basis(2, 0).unwrap();
        let sln = Sln::new(&h, &Operator::sigma_z(), |t| 0.2 * (-t).exp(), |t| -0.05 * (-t).exp(), &grid, 9).unwrap();
        let ens = sln.ensemble(&rho0, 2000).unwrap();
        for (r, s) in ens.mean.iter().zip(&ens.stderr) {
            assert!((r.trace().re - 1.0).abs() <= 3.0 * 2.0 * s + 1e-12);
        }
    }

    #[test]
    fn sln_matches_heom_for_drude_bath() {
        use crate::bath::{matsubara_expansion, BathSpec, SpectralDensity};
        use crate::heom::{heom_evolve, HeomOptions};
        let bath = BathSpec::bosonic(SpectralDensity::drude(0.1, 1.0).unwrap(), 0.1).unwrap();
        let sum = matsubara_expansion(&bath, 2).unwrap();
        let grid = TimeGrid::from_t_max(2.0, 0.01).unwrap();
        let h = Operator::sigma_x().scale(re(0.5));
        let sys = SystemSpec::new(h.clone(), vec![Operator::sigma_z()]).unwrap();
        let rho0 = DensityMatrix::basis(2, 0).unwrap();
        let reference = heom_evolve(&sys, &[sum.clone()], &rho0, 8, &grid, HeomOptions::default()).unwrap();
        let (sr, si) = (sum.clone(), sum);
        let sln = Sln::new(&h, &Operator::sigma_z(), move |t| sr.eval(t).re, move |t| si.eval(t).im, &grid, 4).unwrap();
        let ens = sln.ensemble(&rho0, 4000).unwrap();
        let n = grid.n_steps;
        let d = ens.distance_to(&reference.states)[n];
        assert!(d < 3.0 * ens.stderr[n], "{d} vs {}", ens.stderr[n]);
    }

    #[test]
    fn nmqj_constant_rates_match_lindblad() {
        let h = Operator::sigma_z().scale(re(0.5));
        let system = SystemSpec::new(h, vec![Operator::sigma_minus()]).unwrap();
        let spec = LindbladSpec::new(system, vec![0.25]).unwrap();
        let grid = TimeGrid::from_t_max(6.0, 0.005).unwrap();
        let psi0 = plus_state();
        let rho0 = DensityMatrix::pure(&psi0).unwrap();
        let reference = lindblad_evolve(&spec, &rho0, &grid).unwrap();
        let out = nmqj_evolve(&TimeLocalSpec::from_lindblad(&spec), &psi0, &grid, 10_000, 3).unwrap();
        assert!(out.ensemble.worst_excess(&reference.states, 0.02, 3.0) <= 0.0);
        assert!(out.history.jumps.iter().all(|j| j.forward));
    }

    #[test]
    fn nmqj_waiting_times_are_exponential() {
        let system = SystemSpec::new(Operator::zeros(2), vec![Operator::sigma_minus()]).unwrap();
        let spec = LindbladSpec::new(system, vec![0.5]).unwrap();
        let grid = TimeGrid::from_t_max(12.0, 0.002).unwrap();
        let out = nmqj_evolve(&TimeLocalSpec::from_lindblad(&spec), &[re(1.0), ZERO], &grid, 10_000, 21).unwrap();
        let waits = out.history.first_jump_times();
        // jumps are recorded at the end of their step, so shift back by half a step
        let waits: Vec<f64> = waits.iter().map(|t| t - 0.5 * grid.dt).collect();
        assert!(waits.len() > 9_900);
        // the tail beyond the grid is censored, so compare the conditional law
        let t_end = grid.t_end();
        let rate = 1.0;
        let cut = 1.0 - (-rate * t_end).exp();
        let transformed: Vec<f64> = waits.iter().map(|&t| -(1.0 - (1.0 - (-rate * t).exp()) / cut).ln()).collect();
        let p = ks_exponential_p_value(&transformed, 1.0);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn nmqj_zero_rates_never_jump() {
        let system = SystemSpec::new(Operator::sigma_x(), vec![Operator::sigma_minus()]).unwrap();
        let spec = LindbladSpec::new(system, vec![0.0]).unwrap();
        let grid = TimeGrid::new(0.0, 0.01, 100).unwrap();
        let out = nmqj_evolve(&TimeLocalSpec::from_lindblad(&spec), &plus_state(), &grid, 50, 1).unwrap();
        assert!(out.history.jumps.is_empty());
        assert!(out.history.classes_per_step.iter().all(|&k| k == 1));
    }

    #[test]
    fn nmqj_follows_sign_changing_rates() {
        // detuned Lorentzian: the rotating-frame kernel carries e^{iδt}
        let (g, gamma, detuning) = (1.0, 0.4, 1.5);
        let grid = TimeGrid::from_t_max(12.0, 0.005).unwrap();
        let rates = exact_tcl_rates(|t| c(-gamma * t, detuning * t).exp() * g, 0.0, &grid).unwrap();
        assert!(rates.gamma1.iter().any(|&x| x < -1e-3));
        let spec = rates.time_local_spec();
        let psi0 = plus_state();
        let rho0 = DensityMatrix::pure(&psi0).unwrap();
        let reference = time_local_evolve(&spec, &rho0, &grid).unwrap();
        let out = nmqj_evolve(&spec, &psi0, &grid, 10_000, 17).unwrap();
        assert!(out.ensemble.worst_excess(&reference.states, 0.03, 3.0) <= 0.0);
        assert!(out.history.jumps.iter().any(|j| !j.forward));
    }

    #[test]
    fn nmqj_flags_undoing_an_event_that_never_happened() {
        let system = SystemSpec::new(Operator::zeros(2), vec![Operator::sigma_minus()]).unwrap();
        let mut spec = TimeLocalSpec::from_lindblad(&LindbladSpec::new(system, vec![0.0]).unwrap());
        spec.channels[0].rate = std::sync::Arc::new(|t| if t < 1.0 { 5.0 } else { -1.0 });
        let grid = TimeGrid::from_t_max(2.0, 0.01).unwrap();
        let e = nmqj_evolve(&spec, &[re(1.0), ZERO], &grid, 20, 2);
        assert!(matches!(e, Err(Error::PositivityViolation { .. })), "{e:?}");
    }

    #[test]
    fn kolmogorov_tail() {
        assert!((kolmogorov_q(1.36) - 0.049).abs() < 2e-3);
        assert!((kolmogorov_q(1.63) - 0.0098).abs() < 1e-3);
    }
}
