//! Hierarchical equations of motion for baths whose correlation is a sum of
//! exponentials `C(t) = Σ c_k e^{−μ_k t}` (t ≥ 0), one expansion per coupling.
//!
//! ```text
//! dρ_n/dt = −(iH^× + Σ n_k μ_k) ρ_n − i Σ_k S_k^× ρ_{n+e_k}
//!           − i Σ_k n_k (c_k S_k ρ_{n−e_k} − c̃_k ρ_{n−e_k} S_k)
//! ```
//!
//! where `c̃_k` is the conjugate amplitude of the term whose rate is `μ_k*`.

use rayon::prelude::*;

use crate::bath::{matsubara_converged, BathSpec, CorrelationSum};
use crate::error::{Error, Result};
use crate::linalg::{
    integrate, norm1, substeps_for, unvec_slice, CMatrix, DensityMatrix, Operator, TimeGrid, Trajectory, C64, I,
    ZERO,
};
use crate::mastereq::SystemSpec;

/// Occupation numbers, one per (coupling, exponential term) slot.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HierarchyIndex(pub Vec<u32>);

impl HierarchyIndex {
    pub fn level(&self) -> u32 {
        self.0.iter().sum()
    }
}

/// How the hierarchy is closed at the truncation depth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Closure {
    /// ρ_{n+e_k} = 0 beyond the depth.
    #[default]
    Truncate,
    /// ρ_{n+e_k} ≈ −i(n_k + 1)(c_k S ρ_n − c̃_k ρ_n S)/(μ_k + Σ_j n_j μ_j), the
    /// fast-decay limit of the first omitted tier.
    Markovian,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeomOptions {
    pub closure: Closure,
    /// Largest number of ADOs that will be allocated.
    pub max_ados: u64,
    /// RK4 substeps per output step; 0 chooses from the generator norm.
    pub substeps: usize,
}

impl Default for HeomOptions {
    fn default() -> Self {
        Self {
            closure: Closure::Truncate,
            max_ados: 200_000,
            substeps: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    site: usize,
    c: C64,
    c_tilde: C64,
    mu: C64,
}

/// Flat ADO storage with neighbour tables.
#[derive(Clone, Debug)]
pub struct HierarchyState {
    pub indices: Vec<HierarchyIndex>,
    pub ados: Vec<CMatrix>,
    pub depth: u32,
    pub couplings: Vec<Operator>,
    pub expansions: Vec<CorrelationSum>,
    h: CMatrix,
    slots: Vec<Slot>,
    plus: Vec<Vec<Option<usize>>>,
    minus: Vec<Vec<Option<usize>>>,
    decay: Vec<C64>,
    closure: Closure,
}

/// `C(d + K, K)` with saturation.
pub fn ado_count(depth: u32, slots: usize) -> u64 {
    let mut acc: u128 = 1;
    for i in 1..=slots as u128 {
        acc = acc * (depth as u128 + i) / i;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

fn make_slots(expansions: &[CorrelationSum]) -> Vec<Slot> {
    let mut slots = Vec::new();
    for (site, ex) in expansions.iter().enumerate() {
        let mut terms: Vec<(C64, C64)> = ex.terms().iter().map(|t| (t.c, t.mu)).collect();
        // Rates without a conjugate partner get a zero-amplitude partner so
        // that the conjugate correlation is representable.
        let n0 = terms.len();
        for k in 0..n0 {
            let target = terms[k].1.conj();
            let scale = target.norm().max(1e-300);
            if !terms.iter().any(|(_, m)| (m - target).norm() <= 1e-10 * scale) {
                terms.push((ZERO, target));
            }
        }
        for &(c, mu) in &terms {
            let scale = mu.norm().max(1e-300);
            let partner = terms
                .iter()
                .find(|(_, m)| (m - mu.conj()).norm() <= 1e-10 * scale)
                .map(|(cp, _)| cp.conj())
                .unwrap_or(ZERO);
            slots.push(Slot {
                site,
                c,
                c_tilde: partner,
                mu,
            });
        }
    }
    slots
}

fn enumerate(k: usize, depth: u32) -> Vec<HierarchyIndex> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; k];
    fn rec(pos: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<HierarchyIndex>) {
        if pos == cur.len() {
            out.push(HierarchyIndex(cur.clone()));
            return;
        }
        for v in 0..=left {
            cur[pos] = v;
            rec(pos + 1, left - v, cur, out);
        }
        cur[pos] = 0;
    }
    rec(0, depth, &mut cur, &mut out);
    out.sort_by(|a, b| a.level().cmp(&b.level()).then(b.0.cmp(&a.0)));
    out
}

/// Enumerates all indices with `Σ n ≤ depth`, zero ADOs and `ρ_0 = ρ0`.
pub fn build_hierarchy(
    system: &SystemSpec,
    expansions: &[CorrelationSum],
    depth: u32,
    rho0: &DensityMatrix,
    opts: HeomOptions,
) -> Result<HierarchyState> {
    if depth < 1 {
        return Err(Error::Domain("hierarchy depth must be at least 1".into()));
    }
    if expansions.len() != system.couplings.len() {
        return Err(Error::Dimension(format!(
            "{} expansions for {} couplings",
            expansions.len(),
            system.couplings.len()
        )));
    }
    if expansions.iter().any(|e| e.is_empty()) {
        return Err(Error::Domain("each bath expansion needs at least one term".into()));
    }
    if rho0.dim() != system.dim() {
        return Err(Error::Dimension("initial state dimension mismatch".into()));
    }
    let slots = make_slots(expansions);
    let count = ado_count(depth, slots.len());
    if count > opts.max_ados {
        return Err(Error::Budget {
            what: format!("HEOM auxiliary density operators ({} slots, depth {depth})", slots.len()),
            required: count,
            budget: opts.max_ados,
        });
    }
    let indices = enumerate(slots.len(), depth);
    let lookup: std::collections::HashMap<&HierarchyIndex, usize> =
        indices.iter().enumerate().map(|(i, n)| (n, i)).collect();
    let mut plus = Vec::with_capacity(indices.len());
    let mut minus = Vec::with_capacity(indices.len());
    let mut decay = Vec::with_capacity(indices.len());
    for n in &indices {
        let mut p = Vec::with_capacity(slots.len());
        let mut m = Vec::with_capacity(slots.len());
        let mut g = ZERO;
        for k in 0..slots.len() {
            let mut up = n.clone();
            up.0[k] += 1;
            p.push(lookup.get(&up).copied());
            if n.0[k] > 0 {
                let mut down = n.clone();
                down.0[k] -= 1;
                m.push(lookup.get(&down).copied());
            } else {
                m.push(None);
            }
            g += slots[k].mu * n.0[k] as f64;
        }
        plus.push(p);
        minus.push(m);
        decay.push(g);
    }
    let d = system.dim();
    let mut ados = vec![CMatrix::zeros(d, d); indices.len()];
    ados[0] = rho0.matrix().clone();
    Ok(HierarchyState {
        indices,
        ados,
        depth,
        couplings: system.couplings.clone(),
        expansions: expansions.to_vec(),
        h: system.h.matrix().clone(),
        slots,
        plus,
        minus,
        decay,
        closure: opts.closure,
    })
}

impl HierarchyState {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn physical(&self) -> &CMatrix {
        &self.ados[0]
    }

    fn flat(&self) -> Vec<C64> {
        self.ados.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    /// Derivative of ADO `i` given all ADOs as one flat column-major buffer.
    fn rhs_one(&self, i: usize, y: &[C64], out: &mut [C64]) {
        let d = self.dim();
        let dd = d * d;
        let block = |j: usize| &y[j * dd..(j + 1) * dd];
        let rho = block(i);
        let h = self.h.as_slice();
        for (o, r) in out.iter_mut().zip(rho) {
            *o = -*r * self.decay[i];
        }
        commutator_add(out, h, rho, -I, d);
        let n = &self.indices[i];
        let mut scratch = Vec::new();
        for (k, slot) in self.slots.iter().enumerate() {
            let s = self.couplings[slot.site].matrix().as_slice();
            match self.plus[i][k] {
                Some(j) => commutator_add(out, s, block(j), -I, d),
                None => {
                    if self.closure == Closure::Markovian {
                        let f = -I * (n.0[k] as f64 + 1.0) / (self.decay[i] + slot.mu);
                        scratch.clear();
                        scratch.resize(dd, ZERO);
                        mul_add(&mut scratch, s, rho, slot.c * f, d);
                        mul_add(&mut scratch, rho, s, -slot.c_tilde * f, d);
                        commutator_add(out, s, &scratch, -I, d);
                    }
                }
            }
            if let Some(j) = self.minus[i][k] {
                let nk = n.0[k] as f64;
                mul_add(out, s, block(j), -I * nk * slot.c, d);
                mul_add(out, block(j), s, I * nk * slot.c_tilde, d);
            }
        }
    }

    /// `dρ_n/dt` for every ADO (time-independent generator).
    pub fn rhs(&self, y: &[C64], dy: &mut [C64]) {
        let dd = self.dim() * self.dim();
        if self.len() >= 64 {
            dy.par_chunks_mut(dd)
                .enumerate()
                .for_each(|(i, out)| self.rhs_one(i, y, out));
        } else {
            for (i, out) in dy.chunks_mut(dd).enumerate() {
                self.rhs_one(i, y, out);
            }
        }
    }

    /// (coherent scale, largest decay rate) of the hierarchy generator.
    fn generator_scales(&self) -> (f64, f64) {
        let mut n = 2.0 * norm1(&self.h);
        for slot in &self.slots {
            let s = norm1(self.couplings[slot.site].matrix());
            n += 2.0 * s * ((slot.c.norm() + slot.c_tilde.norm()) * self.depth as f64).sqrt();
        }
        let max_decay = self.decay.iter().map(|g| g.norm()).fold(0.0, f64::max);
        (n, max_decay)
    }
}

/// `out += f·A·B` for column-major `d×d` blocks.
fn mul_add(out: &mut [C64], a: &[C64], b: &[C64], f: C64, d: usize) {
    for col in 0..d {
        for k in 0..d {
            let bk = b[col * d + k] * f;
            if bk == ZERO {
                continue;
            }
            let acol = &a[k * d..(k + 1) * d];
            let ocol = &mut out[col * d..(col + 1) * d];
            for (o, &x) in ocol.iter_mut().zip(acol) {
                *o += x * bk;
            }
        }
    }
}

/// `out += f·[A, B]`.
fn commutator_add(out: &mut [C64], a: &[C64], b: &[C64], f: C64, d: usize) {
    mul_add(out, a, b, f, d);
    mul_add(out, b, a, -f, d);
}

/// Derivative of every ADO, returned as a new state.
pub fn heom_rhs(state: &HierarchyState, _t: f64) -> HierarchyState {
    let y = state.flat();
    let mut dy = vec![ZERO; y.len()];
    state.rhs(&y, &mut dy);
    let d = state.dim();
    let mut out = state.clone();
    for (i, chunk) in dy.chunks(d * d).enumerate() {
        out.ados[i] = unvec_slice(chunk, d);
    }
    out
}

pub fn heom_evolve(
    system: &SystemSpec,
    expansions: &[CorrelationSum],
    rho0: &DensityMatrix,
    depth: u32,
    grid: &TimeGrid,
    opts: HeomOptions,
) -> Result<Trajectory> {
    let state = build_hierarchy(system, expansions, depth, rho0, opts)?;
    let sub = if opts.substeps > 0 {
        opts.substeps
    } else {
        // Accuracy limits the coherent part; fast-decaying ADOs only need stability.
        let (coherent, decay) = state.generator_scales();
        substeps_for(coherent, grid.dt, 0.02).max(substeps_for(decay, grid.dt, 2.0))
    };
    let d = state.dim();
    let dd = d * d;
    let y0 = state.flat();
    let states = integrate(|_, y, dy| state.rhs(y, dy), &y0, grid, sub)?;
    let phys: Vec<CMatrix> = states.iter().map(|y| unvec_slice(&y[..dd], d)).collect();
    let traj = Trajectory::new(grid.times(), phys);
    traj.check_invariants(false)?;
    Ok(traj)
}

/// Drude bath: Matsubara terms added until the correlation on `[dt, t_max]`
/// is reproduced to `tol` relative to the leading amplitude.
pub fn heom_evolve_bath(
    system: &SystemSpec,
    bath: &BathSpec,
    rho0: &DensityMatrix,
    depth: u32,
    grid: &TimeGrid,
    tol: f64,
    opts: HeomOptions,
) -> Result<(Trajectory, usize)> {
    let (sum, m_max, _) = matsubara_converged(bath, tol, grid.dt, grid.t_end().max(grid.dt * 2.0))?;
    let expansions = vec![sum; system.couplings.len()];
    Ok((heom_evolve(system, &expansions, rho0, depth, grid, opts)?, m_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{matsubara_expansion, ExpTerm, SpectralDensity};
    use crate::linalg::{max_abs_diff, re, unitary_propagator};
    use crate::mastereq::{tcl2_evolve, Tcl2Options};

    fn spin(h_scale: f64) -> SystemSpec {
        SystemSpec::new(Operator::sigma_x().scale(re(h_scale)), vec![Operator::sigma_z()]).unwrap()
    }

    #[test]
    fn ado_counts() {
        let one = CorrelationSum::single(re(0.1), re(1.0)).unwrap();
        let rho0 = DensityMatrix::basis(2, 0).unwrap();
        let st = build_hierarchy(&spin(1.0), &[one.clone()], 3, &rho0, HeomOptions::default()).unwrap();
        assert_eq!(st.len(), 4);
        let two = SystemSpec::new(
            Operator::zeros(4),
            vec![Operator::from_real_rows(4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0]).unwrap(), Operator::identity(4)],
        )
        .unwrap();
        let st = build_hierarchy(&two, &[one.clone(), one.clone()], 2, &DensityMatrix::basis(4, 0).unwrap(), HeomOptions::default()).unwrap();
        assert_eq!(st.len(), 6);
        assert!(matches!(build_hierarchy(&spin(1.0), &[one.clone()], 0, &rho0, HeomOptions::default()), Err(Error::Domain(_))));
        let tight = HeomOptions { max_ados: 3, ..Default::default() };
        assert!(matches!(build_hierarchy(&spin(1.0), &[one], 3, &rho0, tight), Err(Error::Budget { required: 4, .. })));
        assert_eq!(ado_count(12, 3), 455);
    }

    #[test]
    fn zero_coupling_is_unitary() {
        let zero = CorrelationSum::new(vec![ExpTerm { c: ZERO, mu: re(1.0) }]).unwrap();
        let rho0 = DensityMatrix::pure(&[re(0.6), re(0.8)]).unwrap();
        let grid = TimeGrid::from_t_max(4.0, 0.02).unwrap();
        let sys = spin(0.7);
        let traj = heom_evolve(&sys, &[zero], &rho0, 4, &grid, HeomOptions::default()).unwrap();
        for (t, r) in traj.times.iter().zip(&traj.states) {
            let u = unitary_propagator(sys.h.matrix(), *t);
            assert!(max_abs_diff(r, &(&u * rho0.matrix() * u.adjoint())) < 1e-9);
        }
    }

    fn drude_problem() -> (SystemSpec, CorrelationSum, TimeGrid, DensityMatrix) {
        // Δ0 = 1, γ = 1, βγ = 0.1, λγ/Δ0² = 0.01.
        let (gamma, lambda, beta) = (1.0, 0.01, 0.1);
        let bath = BathSpec::bosonic(SpectralDensity::drude(lambda, gamma).unwrap(), beta).unwrap();
        let sum = matsubara_expansion(&bath, 2).unwrap();
        let grid = TimeGrid::from_t_max(5.0 / gamma, 0.01).unwrap();
        (spin(0.5), sum, grid, DensityMatrix::basis(2, 0).unwrap())
    }

    #[test]
    fn depth_convergence_and_tcl2_agreement() {
        let (sys, sum, grid, rho0) = drude_problem();
        let a = heom_evolve(&sys, &[sum.clone()], &rho0, 8, &grid, HeomOptions::default()).unwrap();
        let b = heom_evolve(&sys, &[sum.clone()], &rho0, 12, &grid, HeomOptions::default()).unwrap();
        let pa = a.population(0);
        let pb = b.population(0);
        let diff = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "depth diff {diff}");
        assert!(a.max_trace_error() < 1e-8);
        assert!(a.max_hermiticity_error() < 1e-9);
        let tcl = tcl2_evolve(&sys, &sum, &rho0, &grid, Tcl2Options::default()).unwrap();
        let pt = tcl.population(0);
        let rel = pa.iter().zip(&pt).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(rel < 0.01, "heom vs tcl2 {rel}");
    }

    #[test]
    fn markovian_closure_for_fast_bath() {
        // Bath memory 1/20 of the system period: depth 1 with the Markovian
        // closure should beat plain truncation against a deep hierarchy.
        let sys = spin(0.5);
        let sum = CorrelationSum::single(re(2.0), re(20.0)).unwrap();
        let rho0 = DensityMatrix::basis(2, 0).unwrap();
        let grid = TimeGrid::from_t_max(5.0, 0.01).unwrap();
        let run = |depth, closure| {
            let opts = HeomOptions { closure, ..Default::default() };
            heom_evolve(&sys, &[sum.clone()], &rho0, depth, &grid, opts).unwrap()
        };
        let reference = run(8, Closure::Truncate).population(0);
        let err = |t: &Trajectory| {
            t.population(0).iter().zip(&reference).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        };
        let closed = run(1, Closure::Markovian);
        assert!(closed.max_trace_error() < 1e-8);
        let (a, b) = (err(&closed), err(&run(1, Closure::Truncate)));
        assert!(a < 0.5 * b, "{a} {b}");
    }

    #[test]
    fn coupling_scaling_is_second_order() {
        // Halving the system-bath coupling amplitude (λ → λ/4) cuts the
        // deviation from free evolution by four at leading order.
        let sys = spin(0.5);
        let rho0 = DensityMatrix::basis(2, 0).unwrap();
        let grid = TimeGrid::from_t_max(2.0, 0.01).unwrap();
        let bath = BathSpec::bosonic(SpectralDensity::drude(0.02, 1.0).unwrap(), 0.1).unwrap();
        let sum = matsubara_expansion(&bath, 2).unwrap();
        let dev = |scale: f64| {
            let traj = heom_evolve(&sys, &[sum.scaled(scale * scale)], &rho0, 6, &grid, HeomOptions::default()).unwrap();
            let u = unitary_propagator(sys.h.matrix(), 2.0);
            let free = &u * rho0.matrix() * u.adjoint();
            crate::linalg::trace_norm_hermitian(&(traj.last() - free))
        };
        let ratio = dev(1.0) / dev(0.5);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rhs_of_unconnected_hierarchy() {
        let one = CorrelationSum::single(re(0.2), re(1.5)).unwrap();
        let rho0 = DensityMatrix::basis(2, 0).unwrap();
        let st = build_hierarchy(&spin(1.0), &[one], 2, &rho0, HeomOptions::default()).unwrap();
        let d = heom_rhs(&st, 0.0);
        // dρ_0 = −i[H, ρ_0] since ρ_1 = 0; dρ_1 = −i(cSρ_0 − c̃ρ_0S).
        let h = Operator::sigma_x().matrix().clone();
        let r0 = rho0.matrix();
        assert!(max_abs_diff(&d.ados[0], &((&h * r0 - r0 * &h) * (-I))) < 1e-14);
        let s = Operator::sigma_z().matrix().clone();
        let expect = ((&s * r0) * re(0.2) - (r0 * &s) * re(0.2)) * (-I);
        assert!(max_abs_diff(&d.ados[1], &expect) < 1e-14);
    }
}
