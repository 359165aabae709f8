//! Non-Markovianity diagnostics on sampled dynamical maps `Λ(t_k)`.
//!
//! Maps are stored as superoperators on column-stacked operators. The
//! canonical rates follow the dissipator convention of the time-local solver,
//! `Δ(2CρC† − {C†C, ρ})` with `Tr C†C = 1`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{
    c, eigh, re, trace_norm_hermitian, unvec_slice, vec, CMatrix, DensityMatrix, SuperOperator, Trajectory, C64, I,
    ONE, ZERO,
};

/// Largest tolerated condition number of a map that must be inverted.
pub const MAX_CONDITION: f64 = 1e10;

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicalMap {
    pub times: Vec<f64>,
    pub maps: Vec<SuperOperator>,
}

impl DynamicalMap {
    /// Checks `Λ_0 = 1` and trace preservation at every time.
    pub fn new(times: Vec<f64>, maps: Vec<SuperOperator>) -> Result<Self> {
        if times.len() != maps.len() || maps.is_empty() {
            return Err(Error::Dimension("times and maps must match and be nonempty".into()));
        }
        let d = maps[0].dim();
        let id = SuperOperator::identity(d);
        if (maps[0].matrix() - id.matrix()).norm() > 1e-8 {
            return Err(Error::Domain("map at t_0 is not the identity".into()));
        }
        let m = DynamicalMap { times, maps };
        let tp = m.max_trace_error();
        if tp > 1e-8 {
            return Err(Error::Numerical(format!("map is not trace preserving (error {tp:e})")));
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.maps[0].dim()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn apply(&self, k: usize, rho: &CMatrix) -> CMatrix {
        self.maps[k].apply(rho)
    }

    /// Largest `|Tr Λ(E_ij) − δ_ij|` over times and matrix units.
    pub fn max_trace_error(&self) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for m in &self.maps {
            let mat = m.matrix();
            for col in 0..d * d {
                let tr: C64 = (0..d).map(|i| mat[(i + i * d, col)]).sum();
                let target = if col % d == col / d { ONE } else { ZERO };
                worst = worst.max((tr - target).norm());
            }
        }
        worst
    }

    fn step(&self) -> f64 {
        if self.times.len() > 1 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }
}

/// Density matrices whose images determine the map: `|i⟩⟨i|`, and for
/// `i < j` the projectors on `(|i⟩ + |j⟩)/√2` and `(|i⟩ + i|j⟩)/√2`.
fn probe_states(d: usize) -> Vec<CMatrix> {
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        let mut m = CMatrix::zeros(d, d);
        m[(i, i)] = ONE;
        out.push(m);
    }
    for i in 0..d {
        for j in i + 1..d {
            for phase in [ONE, I] {
                let mut v = vec![ZERO; d];
                v[i] = re(std::f64::consts::FRAC_1_SQRT_2);
                v[j] = phase * std::f64::consts::FRAC_1_SQRT_2;
                let v = crate::linalg::CVector::from_vec(v);
                out.push(&v * v.adjoint());
            }
        }
    }
    out
}

/// Assembles `Λ(t_k)` from `d²` runs of a linear solver.
pub fn build_map<F>(dim: usize, solver: F) -> Result<DynamicalMap>
where
    F: Fn(&DensityMatrix) -> Result<Trajectory> + Sync,
{
    let probes = probe_states(dim);
    let runs: Vec<Trajectory> = probes
        .par_iter()
        .map(|p| solver(&DensityMatrix::new_unchecked(p.clone())))
        .collect::<Result<_>>()?;
    let n_t = runs[0].len();
    if runs.iter().any(|r| r.len() != n_t) {
        return Err(Error::Dimension("solver runs differ in length".into()));
    }
    let times = runs[0].times.clone();
    let d = dim;
    let mut maps = Vec::with_capacity(n_t);
    for k in 0..n_t {
        let diag: Vec<&CMatrix> = (0..d).map(|i| &runs[i].states[k]).collect();
        let mut mat = CMatrix::zeros(d * d, d * d);
        for i in 0..d {
            mat.set_column(i + i * d, &vec(diag[i]));
        }
        let mut idx = d;
        for i in 0..d {
            for j in i + 1..d {
                let plus = &runs[idx].states[k];
                let imag = &runs[idx + 1].states[k];
                idx += 2;
                // E_ij = P₊ + iPᵢ − (1 + i)(E_ii + E_jj)/2
                let eij = plus + imag * I - (diag[i] + diag[j]) * c(0.5, 0.5);
                mat.set_column(i + j * d, &vec(&eij));
                mat.set_column(j + i * d, &vec(&eij.adjoint()));
            }
        }
        maps.push(SuperOperator::new(d, mat)?);
    }
    let map = DynamicalMap::new(times, maps)?;

    // linearity probe on a generic mixed state
    let mut probe = CMatrix::from_fn(d, d, |i, j| {
        if i == j {
            re(1.0 + i as f64)
        } else {
            c(0.1 * (i + 2 * j) as f64, 0.05 * (j as f64 - i as f64))
        }
    });
    probe = (&probe + probe.adjoint()) * re(0.5);
    let tr = probe.trace();
    probe /= tr;
    let direct = solver(&DensityMatrix::new_unchecked(probe.clone()))?;
    let mismatch = map
        .maps
        .iter()
        .zip(&direct.states)
        .map(|(m, r)| (m.apply(&probe) - r).norm())
        .fold(0.0, f64::max);
    if mismatch > 1e-6 {
        return Err(Error::Nonlinear { mismatch });
    }
    Ok(map)
}

pub fn trace_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension("states differ in dimension".into()));
    }
    Ok(0.5 * trace_norm_hermitian(&(a.matrix() - b.matrix())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlpResult {
    pub value: f64,
    /// Bloch direction of the optimal antipodal pair (qubit strategy only).
    pub direction: Option<[f64; 3]>,
    /// `D(t)` for the optimal pair.
    pub distance: Vec<f64>,
    /// Set when `σ(t)` changes sign so often that differencing noise dominates.
    pub noisy: bool,
}

fn centered_difference(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|k| {
            if k == 0 {
                (y[1] - y[0]) / h
            } else if k + 1 == n {
                (y[n - 1] - y[n - 2]) / h
            } else {
                (y[k + 1] - y[k - 1]) / (2.0 * h)
            }
        })
        .collect()
}

/// `∫ max(σ, 0) dt` by the trapezoid rule.
fn positive_area(sigma: &[f64], h: f64) -> f64 {
    sigma
        .windows(2)
        .map(|w| 0.5 * h * (w[0].max(0.0) + w[1].max(0.0)))
        .sum()
}

fn pair_curve(map: &DynamicalMap, a: &CMatrix, b: &CMatrix) -> Vec<f64> {
    let diff = a - b;
    map.maps.iter().map(|m| 0.5 * trace_norm_hermitian(&m.apply(&diff))).collect()
}

fn pair_measure(map: &DynamicalMap, a: &CMatrix, b: &CMatrix) -> (f64, Vec<f64>, bool) {
    let d = pair_curve(map, a, b);
    let h = map.step();
    if h == 0.0 {
        return (0.0, d, false);
    }
    let sigma = centered_difference(&d, h);
    let flips = sigma.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
    (positive_area(&sigma, h), d, flips > sigma.len() / 10 + 2)
}

fn bloch_pair(n: [f64; 3]) -> (CMatrix, CMatrix) {
    let half = |s: f64| {
        CMatrix::from_row_slice(
            2,
            2,
            &[
                re(0.5 * (1.0 + s * n[2])),
                c(0.5 * s * n[0], -0.5 * s * n[1]),
                c(0.5 * s * n[0], 0.5 * s * n[1]),
                re(0.5 * (1.0 - s * n[2])),
            ],
        )
    };
    (half(1.0), half(-1.0))
}

fn fibonacci_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * k as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Qubit BLP measure over antipodal pure pairs: `directions` Fibonacci points
/// followed by a shrinking local search around the best one.
pub fn blp_measure(map: &DynamicalMap, directions: usize) -> Result<BlpResult> {
    if map.dim() != 2 {
        return Err(Error::Unsupported(
            "built-in pair search is for qubits; use blp_measure_pairs".into(),
        ));
    }
    let eval = |n: [f64; 3]| {
        let (a, b) = bloch_pair(n);
        pair_measure(map, &a, &b)
    };
    let candidates = fibonacci_directions(directions.max(1));
    let scores: Vec<f64> = candidates.par_iter().map(|&n| eval(n).0).collect();
    let mut best = 0;
    for (k, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = k;
        }
    }
    let mut dir = candidates[best];
    let mut value = scores[best];
    let mut step = 0.5;
    for _ in 0..30 {
        let mut improved = false;
        for axis in 0..3 {
            for sgn in [-1.0, 1.0] {
                let mut trial = dir;
                trial[axis] += sgn * step;
                let trial = normalize(trial);
                let v = eval(trial).0;
                if v > value {
                    value = v;
                    dir = trial;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
        if step < 1e-4 {
            break;
        }
    }
    let (value, distance, noisy) = eval(dir);
    Ok(BlpResult {
        value,
        direction: Some(dir),
        distance,
        noisy,
    })
}

/// BLP measure maximized over user-supplied pairs (any dimension).
pub fn blp_measure_pairs(map: &DynamicalMap, pairs: &[(DensityMatrix, DensityMatrix)]) -> Result<BlpResult> {
    if pairs.is_empty() {
        return Err(Error::Domain("no state pairs given".into()));
    }
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for (a, b) in pairs {
        if a.dim() != map.dim() || b.dim() != map.dim() {
            return Err(Error::Dimension("pair state dimension differs from the map".into()));
        }
        let r = pair_measure(map, a.matrix(), b.matrix());
        if best.as_ref().is_none_or(|x| r.0 > x.0) {
            best = Some(r);
        }
    }
    let (value, distance, noisy) = best.unwrap();
    Ok(BlpResult {
        value,
        direction: None,
        distance,
        noisy,
    })
}

fn condition_number(m: &CMatrix) -> f64 {
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

fn inverse(map: &DynamicalMap, k: usize) -> Result<CMatrix> {
    let m = map.maps[k].matrix();
    if condition_number(m) > MAX_CONDITION {
        return Err(Error::MapNotInvertible { time: map.times[k] });
    }
    m.clone()
        .try_inverse()
        .ok_or(Error::MapNotInvertible { time: map.times[k] })
}

/// Choi matrix `(Λ ⊗ 1)(|Φ⟩⟨Φ|)` with `|Φ⟩ = Σ|ii⟩/√d`.
pub fn choi(s: &CMatrix, d: usize) -> CMatrix {
    let mut out = CMatrix::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            let img = unvec_slice(s.column(i + j * d).as_slice(), d);
            for a in 0..d {
                for b in 0..d {
                    out[(a * d + i, b * d + j)] = img[(a, b)] / d as f64;
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RhpResult {
    pub value: f64,
    /// `g(t_k)` for the interval `[t_k, t_{k+1}]`.
    pub g: Vec<f64>,
}

/// RHP measure from the intermediate maps `Λ_{k+1} Λ_k⁻¹`.
pub fn rhp_measure(map: &DynamicalMap) -> Result<RhpResult> {
    let d = map.dim();
    let eps = map.step();
    let g: Vec<f64> = (0..map.len().saturating_sub(1))
        .into_par_iter()
        .map(|k| {
            let inter = map.maps[k + 1].matrix() * inverse(map, k)?;
            let ch = choi(&inter, d);
            Ok((trace_norm_hermitian(&((&ch + ch.adjoint()) * re(0.5))) - 1.0) / eps)
        })
        .collect::<Result<_>>()?;
    let value = g.iter().map(|x| x.max(0.0) * eps).sum();
    Ok(RhpResult { value, g })
}

/// Orthonormal Hermitian basis: `1/√d`, then symmetric, antisymmetric and
/// diagonal generalized Gell-Mann matrices.
pub fn operator_basis(d: usize) -> Vec<CMatrix> {
    let mut out = vec![CMatrix::identity(d, d) * re(1.0 / (d as f64).sqrt())];
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for j in 0..d {
        for k in j + 1..d {
            let mut m = CMatrix::zeros(d, d);
            m[(j, k)] = re(s);
            m[(k, j)] = re(s);
            out.push(m);
            let mut m = CMatrix::zeros(d, d);
            m[(j, k)] = c(0.0, -s);
            m[(k, j)] = c(0.0, s);
            out.push(m);
        }
    }
    for l in 1..d {
        let norm = 1.0 / ((l * (l + 1)) as f64).sqrt();
        let mut m = CMatrix::zeros(d, d);
        for q in 0..l {
            m[(q, q)] = re(norm);
        }
        m[(l, l)] = re(-(l as f64) * norm);
        out.push(m);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalRates {
    pub times: Vec<f64>,
    /// `Δ_k(t)` in decreasing order.
    pub rates: Vec<Vec<f64>>,
    /// Channels `C_k(t)` with `Tr C†C = 1`.
    pub channels: Vec<Vec<CMatrix>>,
    pub hamiltonians: Vec<CMatrix>,
    /// Largest anti-Hermitian part seen in the decoherence matrix.
    pub hermiticity_residual: f64,
}

/// Generator `L = Λ̇ Λ⁻¹` split into Hamiltonian and canonical dissipator.
/// `Λ̇` uses fourth-order five-point differences.
pub fn canonical_rates(map: &DynamicalMap) -> Result<CanonicalRates> {
    canonical_rates_with_basis(map, &operator_basis(map.dim()))
}

/// As [`canonical_rates`] with a caller-chosen orthonormal basis whose first
/// element is `1/√d`.
pub fn canonical_rates_with_basis(map: &DynamicalMap, basis: &[CMatrix]) -> Result<CanonicalRates> {
    let d = map.dim();
    let n = map.len();
    let h = map.step();
    if n < 5 || h == 0.0 {
        return Err(Error::Domain("canonical rates need at least five time points".into()));
    }
    if basis.len() != d * d {
        return Err(Error::Dimension(format!("basis needs {} elements", d * d)));
    }
    let per_time: Vec<(Vec<f64>, Vec<CMatrix>, CMatrix, f64)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let m = |j: usize| map.maps[j].matrix();
            let deriv = if k >= 2 && k + 2 < n {
                (m(k - 2) - m(k + 2) + (m(k + 1) - m(k - 1)) * re(8.0)) / re(12.0 * h)
            } else {
                // fourth-order one-sided stencils near the ends
                let (base, sign, w) = match k {
                    0 => (0, 1.0, [-25.0, 48.0, -36.0, 16.0, -3.0]),
                    1 => (0, 1.0, [-3.0, -10.0, 18.0, -6.0, 1.0]),
                    _ if k + 1 == n => (n - 1, -1.0, [-25.0, 48.0, -36.0, 16.0, -3.0]),
                    _ => (n - 1, -1.0, [-3.0, -10.0, 18.0, -6.0, 1.0]),
                };
                let mut acc = CMatrix::zeros(m(0).nrows(), m(0).ncols());
                for (q, wq) in w.iter().enumerate() {
                    let idx = if sign > 0.0 { base + q } else { base - q };
                    acc += m(idx) * re(*wq);
                }
                acc * re(sign / (12.0 * h))
            };
            let gen = deriv * inverse(map, k)?;
            Ok(decompose(&gen, basis, d))
        })
        .collect::<Result<_>>()?;
    let mut out = CanonicalRates {
        times: map.times.clone(),
        rates: Vec::with_capacity(n),
        channels: Vec::with_capacity(n),
        hamiltonians: Vec::with_capacity(n),
        hermiticity_residual: 0.0,
    };
    for (r, ch, hm, res) in per_time {
        out.rates.push(r);
        out.channels.push(ch);
        out.hamiltonians.push(hm);
        out.hermiticity_residual = out.hermiticity_residual.max(res);
    }
    Ok(out)
}

fn decompose(gen: &CMatrix, basis: &[CMatrix], d: usize) -> (Vec<f64>, Vec<CMatrix>, CMatrix, f64) {
    let m = basis.len();
    // c_ij = ⟨conj(G_j) ⊗ G_i, L⟩
    let mut coef = CMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let k = basis[j].map(|z| z.conj()).kronecker(&basis[i]);
            coef[(i, j)] = k.iter().zip(gen.iter()).map(|(a, b)| a.conj() * b).sum::<C64>();
        }
    }
    let sub = coef.view((1, 1), (m - 1, m - 1)).into_owned();
    let residual = (&sub - sub.adjoint()).norm() * 0.5;
    let (vals, vecs) = eigh(&sub);
    let mut f = CMatrix::identity(d, d) * (coef[(0, 0)] / (2.0 * d as f64));
    for i in 1..m {
        f += &basis[i] * (coef[(i, 0)] / (d as f64).sqrt());
    }
    let ham = (&f - f.adjoint()) * (I * 0.5);
    let mut order: Vec<usize> = (0..m - 1).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let rates = order.iter().map(|&k| 0.5 * vals[k]).collect();
    let channels = order
        .iter()
        .map(|&k| {
            let mut ch = CMatrix::zeros(d, d);
            for i in 1..m {
                ch += &basis[i] * vecs[(i - 1, k)];
            }
            ch
        })
        .collect();
    (rates, channels, ham, residual)
}

/// CSV with columns `t,D,g,Delta_0..`; `g` is empty on the last row.
pub fn measures_csv(times: &[f64], distance: &[f64], g: &[f64], rates: &CanonicalRates) -> String {
    let k = rates.rates.first().map(|r| r.len()).unwrap_or(0);
    let mut s = String::from("t,D,g");
    for i in 0..k {
        s.push_str(&format!(",Delta_{i}"));
    }
    s.push('\n');
    for (n, t) in times.iter().enumerate() {
        s.push_str(&format!("{t:.17e},{:.17e},", distance[n]));
        if let Some(x) = g.get(n) {
            s.push_str(&format!("{x:.17e}"));
        }
        for r in &rates.rates[n] {
            s.push_str(&format!(",{r:.17e}"));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{amplitude_damping_state, exact_tcl_rates, TclRates};
    use crate::linalg::{Operator, TimeGrid};
    use crate::mastereq::{lindblad_evolve, LindbladSpec, SystemSpec};
    use proptest::prelude::*;

    fn lindblad_map(grid: &TimeGrid) -> (DynamicalMap, [f64; 2]) {
        let dephase = Operator::sigma_z().scale(re(std::f64::consts::FRAC_1_SQRT_2));
        let sys = SystemSpec::new(
            Operator::sigma_z().scale(re(0.5)),
            vec![Operator::sigma_minus(), dephase],
        )
        .unwrap();
        let rates = [0.3, 0.1];
        let spec = LindbladSpec::new(sys, rates.to_vec()).unwrap();
        let grid = *grid;
        (build_map(2, |r| lindblad_evolve(&spec, r, &grid)).unwrap(), rates)
    }

    fn unitary_map(grid: &TimeGrid) -> DynamicalMap {
        let sys = SystemSpec::new(Operator::sigma_x().scale(re(0.7)), vec![]).unwrap();
        let spec = LindbladSpec::new(sys, vec![]).unwrap();
        let grid = *grid;
        build_map(2, |r| lindblad_evolve(&spec, r, &grid)).unwrap()
    }

    fn damping() -> (TclRates, DynamicalMap) {
        // detuned exponential kernel: γ1 changes sign but u never vanishes
        let grid = TimeGrid::from_t_max(10.0, 0.002).unwrap();
        let rates = exact_tcl_rates(|t| c(-0.4 * t, 1.5 * t).exp(), 0.0, &grid).unwrap();
        let u = rates.u.clone();
        let times = grid.times();
        let map = build_map(2, |r| {
            Ok(Trajectory::new(
                times.clone(),
                u.iter().map(|&x| amplitude_damping_state(x, r.matrix())).collect(),
            ))
        })
        .unwrap();
        (rates, map)
    }

    #[test]
    fn trace_distance_examples() {
        let a = DensityMatrix::from_matrix(CMatrix::from_diagonal(&crate::linalg::CVector::from_vec(vec![
            re(0.75),
            re(0.25),
        ])))
        .unwrap();
        let b = DensityMatrix::from_matrix(CMatrix::from_diagonal(&crate::linalg::CVector::from_vec(vec![
            re(0.25),
            re(0.75),
        ])))
        .unwrap();
        assert!((trace_distance(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(trace_distance(&a, &a).unwrap(), 0.0);
        let e = DensityMatrix::basis(2, 0).unwrap();
        let g = DensityMatrix::basis(2, 1).unwrap();
        assert!((trace_distance(&e, &g).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unitary_map_properties() {
        let grid = TimeGrid::from_t_max(5.0, 0.01).unwrap();
        let map = unitary_map(&grid);
        assert!((map.maps[0].matrix() - SuperOperator::identity(2).matrix()).norm() < 1e-15);
        for m in &map.maps {
            assert!(m.matrix().singular_values().iter().all(|s| (s - 1.0).abs() < 1e-8));
        }
        let blp = blp_measure(&map, 60).unwrap();
        assert!(blp.value < 1e-9);
        let rhp = rhp_measure(&map).unwrap();
        assert!(rhp.value < 1e-9);
        let can = canonical_rates(&map).unwrap();
        assert!(can.rates.iter().flatten().all(|r| r.abs() < 1e-6));
    }

    #[test]
    fn zero_coupling_blp_is_exactly_zero() {
        let grid = TimeGrid::new(0.0, 0.1, 20).unwrap();
        let map = build_map(2, |r| Ok(Trajectory::new(grid.times(), vec![r.matrix().clone(); grid.len()]))).unwrap();
        assert_eq!(blp_measure(&map, 60).unwrap().value, 0.0);
    }

    #[test]
    fn lindblad_semigroup_is_markovian() {
        let grid = TimeGrid::from_t_max(5.0, 0.01).unwrap();
        let (map, input) = lindblad_map(&grid);
        assert!(blp_measure(&map, 60).unwrap().value < 1e-6);
        let rhp = rhp_measure(&map).unwrap();
        assert!(rhp.value < 1e-6);
        assert!(rhp.g.iter().all(|&g| g < 1e-6));
        let can = canonical_rates(&map).unwrap();
        for r in &can.rates {
            assert!((r[0] - input[0]).abs() < 1e-5, "{r:?}");
            assert!((r[1] - input[1]).abs() < 1e-5, "{r:?}");
            assert!(r[2].abs() < 1e-5);
        }
        let h = &can.hamiltonians[100];
        assert!((h - Operator::sigma_z().scale(re(0.5)).matrix()).norm() < 1e-5);
    }

    #[test]
    fn damping_map_matches_block_form() {
        let (rates, map) = damping();
        for (k, m) in map.maps.iter().enumerate().step_by(97) {
            let u = rates.u[k];
            let p = u.norm_sqr();
            // column-stacked order: ee, ge, eg, gg
            let mut block = CMatrix::zeros(4, 4);
            block[(0, 0)] = re(p);
            block[(3, 0)] = re(1.0 - p);
            block[(1, 1)] = u.conj();
            block[(2, 2)] = u;
            block[(3, 3)] = ONE;
            assert!((m.matrix() - block).norm() < 1e-8);
        }
    }

    #[test]
    fn damping_measures_follow_the_rate_sign() {
        let (rates, map) = damping();
        let can = canonical_rates(&map).unwrap();
        let mut worst: f64 = 0.0;
        for (k, r) in can.rates.iter().enumerate().skip(2).take(map.len() - 4) {
            let dominant = r.iter().cloned().fold(0.0, |a: f64, b: f64| if b.abs() > a.abs() { b } else { a });
            worst = worst.max((dominant - rates.gamma1[k]).abs());
        }
        assert!(worst < 1e-5, "{worst}");

        let rhp = rhp_measure(&map).unwrap();
        assert!(rhp.value > 0.0);
        let h = map.step();
        // compare sign-change locations of g and −γ1
        let tol = 1e-9 / h;
        let marks = |v: Vec<bool>| -> Vec<usize> { (1..v.len()).filter(|&k| v[k] != v[k - 1]).collect() };
        let rhp_pos = marks(rhp.g.iter().map(|&g| g > tol).collect());
        let neg_rate = marks(rates.gamma1[..rhp.g.len()].iter().map(|&x| x < 0.0).collect());
        assert_eq!(rhp_pos.len(), neg_rate.len());
        for (a, b) in rhp_pos.iter().zip(&neg_rate) {
            assert!(a.abs_diff(*b) <= 2, "{a} vs {b}");
        }

        let blp = blp_measure(&map, 60).unwrap();
        assert!(blp.value > 0.0);
        // z-pair closed form: D(t) = |u|², x-pair: D(t) = |u|
        let ups = |d: Vec<f64>| d.windows(2).map(|w| (w[1] - w[0]).max(0.0)).sum::<f64>();
        let nz = ups(rates.u.iter().map(|u| u.norm_sqr()).collect());
        let nx = ups(rates.u.iter().map(|u| u.norm()).collect());
        assert!(blp.value >= nz.max(nx) * (1.0 - 1e-3), "{} vs {nz} {nx}", blp.value);
        assert!(rhp.value > 1e-6);
    }

    #[test]
    fn canonical_rates_do_not_depend_on_the_basis() {
        let (_, map) = damping();
        let short = DynamicalMap::new(map.times[..200].to_vec(), map.maps[..200].to_vec()).unwrap();
        let base = operator_basis(2);
        let angle: f64 = 0.7;
        let (cs, sn) = (angle.cos(), angle.sin());
        let mut rotated = base.clone();
        rotated[1] = &base[1] * re(cs) + &base[3] * re(sn);
        rotated[3] = &base[3] * re(cs) - &base[1] * re(sn);
        rotated.swap(1, 2);
        let a = canonical_rates(&short).unwrap();
        let b = canonical_rates_with_basis(&short, &rotated).unwrap();
        for (x, y) in a.rates.iter().zip(&b.rates) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn nonlinear_solver_is_rejected() {
        let grid = TimeGrid::new(0.0, 0.1, 5).unwrap();
        let e = build_map(2, |r| {
            let m = r.matrix();
            let sq = m * m;
            let t = sq.trace();
            Ok(Trajectory::new(grid.times(), vec![sq / t; grid.len()]))
        });
        assert!(matches!(e, Err(Error::Nonlinear { .. }) | Err(Error::Domain(_))));
    }

    #[test]
    fn csv_layout() {
        let grid = TimeGrid::new(0.0, 0.1, 4).unwrap();
        let map = unitary_map(&grid);
        let blp = blp_measure(&map, 8).unwrap();
        let rhp = rhp_measure(&map).unwrap();
        let can = canonical_rates(&map).unwrap();
        let text = measures_csv(&map.times, &blp.distance, &rhp.g, &can);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,D,g,Delta_0,Delta_1,Delta_2");
        assert_eq!(lines.len(), 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn divisible_maps_have_nonnegative_rates(g1 in 0.0f64..1.0, g2 in 0.0f64..1.0, w in -2.0f64..2.0) {
            let sys = SystemSpec::new(Operator::sigma_z().scale(re(w)), vec![Operator::sigma_minus(), Operator::sigma_plus()]).unwrap();
            let spec = LindbladSpec::new(sys, vec![g1, g2]).unwrap();
            let grid = TimeGrid::from_t_max(2.0, 0.01).unwrap();
            let map = build_map(2, |r| lindblad_evolve(&spec, r, &grid)).unwrap();
            let can = canonical_rates(&map).unwrap();
            prop_assert!(can.rates.iter().flatten().all(|&r| r >= -1e-5));
            let blp = blp_measure(&map, 30).unwrap().value;
            let rhp = rhp_measure(&map).unwrap().value;
            prop_assert!(!(blp > 1e-6) || rhp > 1e-6);
        }
    }
}
