//! Dense complex linear algebra on small Hilbert spaces.
//!
//! All superoperators act on column-stacked operators: `vec(A X B) = (Bᵀ ⊗ A) vec(X)`.
//! nalgebra stores matrices column-major, so `vec` is a plain copy of the storage.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub const TOL_HERM: f64 = 1e-10;
pub const TOL_TRACE: f64 = 1e-10;
pub const TOL_POS: f64 = 1e-8;

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn re(x: f64) -> C64 {
    C64::new(x, 0.0)
}

pub const I: C64 = C64 { re: 0.0, im: 1.0 };
pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// Square complex matrix acting on a `dim`-dimensional Hilbert space.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    m: CMatrix,
}

impl Operator {
    pub fn new(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!(
                "operator must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::Dimension("operator dimension must be >= 1".into()));
        }
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Numerical("operator has non-finite entries".into()));
        }
        Ok(Self { m })
    }

    /// Builds an operator from row-major entries.
    pub fn from_rows(dim: usize, entries: &[C64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::Dimension(format!(
                "expected {} entries for dim {}, got {}",
                dim * dim,
                dim,
                entries.len()
            )));
        }
        Self::new(CMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn from_real_rows(dim: usize, entries: &[f64]) -> Result<Self> {
        let v: Vec<C64> = entries.iter().map(|&x| re(x)).collect();
        Self::from_rows(dim, &v)
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            m: CMatrix::identity(dim, dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            m: CMatrix::zeros(dim, dim),
        }
    }

    pub fn sigma_x() -> Self {
        Self::from_real_rows(2, &[0.0, 1.0, 1.0, 0.0]).unwrap()
    }

    pub fn sigma_y() -> Self {
        Self::from_rows(2, &[ZERO, -I, I, ZERO]).unwrap()
    }

    pub fn sigma_z() -> Self {
        Self::from_real_rows(2, &[1.0, 0.0, 0.0, -1.0]).unwrap()
    }

    /// Lowering operator `|g⟩⟨e|` with basis order (e, g), so `σ_z = diag(1, -1)`.
    pub fn sigma_minus() -> Self {
        Self::from_real_rows(2, &[0.0, 0.0, 1.0, 0.0]).unwrap()
    }

    pub fn sigma_plus() -> Self {
        Self::sigma_minus().dagger()
    }

    /// Truncated bosonic annihilation operator on `n_max + 1` Fock states.
    pub fn annihilation(n_max: usize) -> Self {
        let d = n_max + 1;
        let mut m = CMatrix::zeros(d, d);
        for n in 1..d {
            m[(n - 1, n)] = re((n as f64).sqrt());
        }
        Self { m }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    pub fn dagger(&self) -> Self {
        Self {
            m: self.m.adjoint(),
        }
    }

    pub fn scale(&self, s: C64) -> Self {
        Self { m: &self.m * s }
    }

    pub fn hermiticity_residual(&self) -> f64 {
        max_abs_diff(&self.m, &self.m.adjoint())
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_residual() <= tol
    }

    pub fn trace(&self) -> C64 {
        self.m.trace()
    }

    pub fn is_zero(&self) -> bool {
        self.m.iter().all(|z| z.norm() == 0.0)
    }
}

/// Validated density matrix: Hermitian, unit trace, positive semidefinite.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    op: Operator,
}

impl DensityMatrix {
    pub fn new(op: Operator) -> Result<Self> {
        let herm = op.hermiticity_residual();
        if herm > TOL_HERM {
            return Err(Error::InvalidState(format!(
                "density matrix not Hermitian (residual {herm:e})"
            )));
        }
        let tr = op.trace();
        if (tr - ONE).norm() > TOL_TRACE {
            return Err(Error::InvalidState(format!(
                "density matrix trace {tr} differs from 1"
            )));
        }
        let min_ev = min_eigenvalue_hermitian(op.matrix());
        if min_ev < -TOL_POS {
            return Err(Error::InvalidState(format!(
                "density matrix not positive (min eigenvalue {min_ev:e})"
            )));
        }
        Ok(Self { op })
    }

    pub fn from_matrix(m: CMatrix) -> Result<Self> {
        Self::new(Operator::new(m)?)
    }

    /// Wraps a matrix without checking the state invariants (solver output).
    pub fn new_unchecked(m: CMatrix) -> Self {
        Self { op: Operator { m } }
    }

    pub fn pure(psi: &[C64]) -> Result<Self> {
        let v = CVector::from_column_slice(psi);
        let n = v.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::InvalidState("state vector has zero norm".into()));
        }
        let v = v / re(n);
        Self::from_matrix(&v * v.adjoint())
    }

    /// `|k⟩⟨k|` in a `dim`-dimensional space.
    pub fn basis(dim: usize, k: usize) -> Result<Self> {
        if k >= dim {
            return Err(Error::Domain(format!("basis index {k} out of range {dim}")));
        }
        let mut m = CMatrix::zeros(dim, dim);
        m[(k, k)] = ONE;
        Self::from_matrix(m)
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self::new_unchecked(CMatrix::identity(dim, dim) / re(dim as f64))
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn matrix(&self) -> &CMatrix {
        self.op.matrix()
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn into_matrix(self) -> CMatrix {
        self.op.m
    }

    pub fn purity(&self) -> f64 {
        (self.matrix() * self.matrix()).trace().re
    }

    pub fn expect(&self, a: &Operator) -> C64 {
        (a.matrix() * self.matrix()).trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue_hermitian(self.matrix())
    }
}

/// Linear map on operators as a `d² × d²` matrix in the column-stacking convention.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperOperator {
    dim: usize,
    m: CMatrix,
}

impl SuperOperator {
    pub fn new(dim: usize, m: CMatrix) -> Result<Self> {
        let n = dim * dim;
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::Dimension(format!(
                "superoperator for dim {dim} must be {n}x{n}, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Numerical("superoperator has non-finite entries".into()));
        }
        Ok(Self { dim, m })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            m: CMatrix::identity(dim * dim, dim * dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            m: CMatrix::zeros(dim * dim, dim * dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    pub fn apply(&self, x: &CMatrix) -> CMatrix {
        unvec(&(&self.m * vec(x)), self.dim)
    }

    pub fn compose(&self, other: &SuperOperator) -> SuperOperator {
        SuperOperator {
            dim: self.dim,
            m: &self.m * &other.m,
        }
    }

    /// `ρ ↦ A ρ B`.
    pub fn sandwich(a: &CMatrix, b: &CMatrix) -> Self {
        Self {
            dim: a.nrows(),
            m: b.transpose().kronecker(a),
        }
    }

    /// `ρ ↦ A ρ`.
    pub fn left(a: &CMatrix) -> Self {
        let d = a.nrows();
        Self {
            dim: d,
            m: CMatrix::identity(d, d).kronecker(a),
        }
    }

    /// `ρ ↦ ρ B`.
    pub fn right(b: &CMatrix) -> Self {
        let d = b.nrows();
        Self {
            dim: d,
            m: b.transpose().kronecker(&CMatrix::identity(d, d)),
        }
    }

    /// `ρ ↦ rate·(2 C ρ C† − {C†C, ρ})`.
    pub fn dissipator(cop: &CMatrix, rate: f64) -> Self {
        let cd = cop.adjoint();
        let cdc = &cd * cop;
        let m = (Self::sandwich(cop, &cd).m * re(2.0) - Self::left(&cdc).m - Self::right(&cdc).m)
            * re(rate);
        Self { dim: cop.nrows(), m }
    }

    /// `ρ ↦ −i[H, ρ]`.
    pub fn hamiltonian(h: &CMatrix) -> Self {
        Self {
            dim: h.nrows(),
            m: commutator_matrix(h) * (-I),
        }
    }

    pub fn add(&self, other: &SuperOperator) -> SuperOperator {
        SuperOperator {
            dim: self.dim,
            m: &self.m + &other.m,
        }
    }

    pub fn scale(&self, s: C64) -> SuperOperator {
        SuperOperator {
            dim: self.dim,
            m: &self.m * s,
        }
    }
}

pub fn vec(x: &CMatrix) -> CVector {
    CVector::from_column_slice(x.as_slice())
}

pub fn unvec(v: &CVector, dim: usize) -> CMatrix {
    CMatrix::from_column_slice(dim, dim, v.as_slice())
}

pub fn unvec_slice(v: &[C64], dim: usize) -> CMatrix {
    CMatrix::from_column_slice(dim, dim, v)
}

fn commutator_matrix(a: &CMatrix) -> CMatrix {
    let d = a.nrows();
    let id = CMatrix::identity(d, d);
    id.kronecker(a) - a.transpose().kronecker(&id)
}

fn anticommutator_matrix(a: &CMatrix) -> CMatrix {
    let d = a.nrows();
    let id = CMatrix::identity(d, d);
    id.kronecker(a) + a.transpose().kronecker(&id)
}

/// Superoperator of `ρ ↦ Aρ − ρA`.
pub fn commutator_super(a: &Operator) -> SuperOperator {
    SuperOperator {
        dim: a.dim(),
        m: commutator_matrix(a.matrix()),
    }
}

/// Superoperator of `ρ ↦ Aρ + ρA`.
pub fn anticommutator_super(a: &Operator) -> SuperOperator {
    SuperOperator {
        dim: a.dim(),
        m: anticommutator_matrix(a.matrix()),
    }
}

/// Sum of singular values.
pub fn trace_norm(a: &CMatrix) -> Result<f64> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension("trace norm needs a square matrix".into()));
    }
    if a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numerical("trace norm of non-finite matrix".into()));
    }
    let sv = a
        .clone()
        .try_svd(false, false, 1e-15, 10_000)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?
        .singular_values;
    Ok(sv.iter().sum())
}

/// Trace norm of a Hermitian matrix via its eigenvalues (cheaper than SVD).
pub fn trace_norm_hermitian(a: &CMatrix) -> f64 {
    let h = (a + a.adjoint()) * re(0.5);
    h.symmetric_eigenvalues().iter().map(|x| x.abs()).sum()
}

pub fn min_eigenvalue_hermitian(a: &CMatrix) -> f64 {
    let h = (a + a.adjoint()) * re(0.5);
    h.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues sorted ascending.
pub fn eigh(a: &CMatrix) -> (Vec<f64>, CMatrix) {
    let h = (a + a.adjoint()) * re(0.5);
    let eig = h.symmetric_eigen();
    let d = a.nrows();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = CMatrix::zeros(d, d);
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// `exp(−i H t)` for Hermitian `H`.
pub fn unitary_propagator(h: &CMatrix, t: f64) -> CMatrix {
    let (vals, vecs) = eigh(h);
    let phases = CMatrix::from_diagonal(&CVector::from_iterator(
        vals.len(),
        vals.iter().map(|&e| (-I * e * t).exp()),
    ));
    &vecs * phases * vecs.adjoint()
}

pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

/// Uniform time grid `t_k = t0 + k·dt`, `k = 0..=n_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(Error::Domain(format!("time step must be positive, got {dt}")));
        }
        if n_steps == 0 {
            return Err(Error::Domain("time grid needs at least one step".into()));
        }
        Ok(Self { t0, dt, n_steps })
    }

    /// Grid on `[0, t_max]` with step as close to `dt` as divides evenly.
    pub fn from_t_max(t_max: f64, dt: f64) -> Result<Self> {
        if !(t_max > 0.0) {
            return Err(Error::Domain(format!("t_max must be positive, got {t_max}")));
        }
        let n = (t_max / dt).round().max(1.0) as usize;
        Self::new(0.0, t_max / n as f64, n)
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn t(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.t(self.n_steps)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.t(k)).collect()
    }

    /// Same span with `factor` times more steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            t0: self.t0,
            dt: self.dt / factor as f64,
            n_steps: self.n_steps * factor,
        }
    }
}

/// Reusable classical RK4 stepper for `dy/dt = f(t, y)` on complex vectors.
pub struct Rk4 {
    k1: Vec<C64>,
    k2: Vec<C64>,
    k3: Vec<C64>,
    k4: Vec<C64>,
    tmp: Vec<C64>,
}

impl Rk4 {
    pub fn new(n: usize) -> Self {
        Self {
            k1: vec![ZERO; n],
            k2: vec![ZERO; n],
            k3: vec![ZERO; n],
            k4: vec![ZERO; n],
            tmp: vec![ZERO; n],
        }
    }

    pub fn step<F>(&mut self, rhs: &mut F, t: f64, h: f64, y: &mut [C64])
    where
        F: FnMut(f64, &[C64], &mut [C64]),
    {
        let n = y.len();
        rhs(t, y, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = y[i] + self.k1[i] * (0.5 * h);
        }
        rhs(t + 0.5 * h, &self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = y[i] + self.k2[i] * (0.5 * h);
        }
        rhs(t + 0.5 * h, &self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = y[i] + self.k3[i] * h;
        }
        rhs(t + h, &self.tmp, &mut self.k4);
        let h6 = h / 6.0;
        for i in 0..n {
            y[i] += (self.k1[i] + (self.k2[i] + self.k3[i]) * 2.0 + self.k4[i]) * h6;
        }
    }
}

pub fn all_finite(y: &[C64]) -> bool {
    y.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Fixed-step RK4 sampled at every grid point; `substeps` RK4 steps per grid interval.
pub fn integrate<F>(mut rhs: F, y0: &[C64], grid: &TimeGrid, substeps: usize) -> Result<Vec<Vec<C64>>>
where
    F: FnMut(f64, &[C64], &mut [C64]),
{
    let substeps = substeps.max(1);
    let h = grid.dt / substeps as f64;
    let mut stepper = Rk4::new(y0.len());
    let mut y = y0.to_vec();
    let mut out = Vec::with_capacity(grid.len());
    out.push(y.clone());
    for k in 0..grid.n_steps {
        let t = grid.t(k);
        for s in 0..substeps {
            stepper.step(&mut rhs, t + s as f64 * h, h, &mut y);
        }
        if !all_finite(&y) {
            return Err(Error::NonFinite {
                step: k + 1,
                time: grid.t(k + 1),
            });
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// Induced 1-norm (max column sum).
pub fn norm1(m: &CMatrix) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// RK4 substeps per interval so that `‖G‖·h` stays below `max_step`.
pub fn substeps_for(norm: f64, dt: f64, max_step: f64) -> usize {
    ((norm * dt / max_step).ceil() as usize).max(1)
}

/// Propagates `dX/dt = G X` for a constant superoperator, returning every grid point.
/// Works for any operator `X`, Hermitian or not.
pub fn propagate_constant(gen: &SuperOperator, x0: &CMatrix, grid: &TimeGrid) -> Result<Vec<CMatrix>> {
    let d = gen.dim();
    let step = expm(&(gen.matrix() * re(grid.dt)));
    let mut y = vec(x0);
    let mut out = Vec::with_capacity(grid.len());
    out.push(x0.clone());
    for k in 0..grid.n_steps {
        y = &step * &y;
        if !all_finite(y.as_slice()) {
            return Err(Error::NonFinite { step: k + 1, time: grid.t(k + 1) });
        }
        out.push(unvec_slice(y.as_slice(), d));
    }
    Ok(out)
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &CMatrix) -> CMatrix {
    let n = a.nrows();
    let norm = norm1(a);
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a * re(0.5f64.powi(s));
    let mut term = CMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=20 {
        term = &term * &scaled * re(1.0 / k as f64);
        sum += &term;
        if norm1(&term) < 1e-18 * norm1(&sum) {
            break;
        }
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Density-matrix time series produced by a solver.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<CMatrix>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<CMatrix>) -> Self {
        Self { times, states }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map(|m| m.nrows()).unwrap_or(0)
    }

    /// `Tr(A ρ(t))` at every time.
    pub fn expect(&self, a: &Operator) -> Vec<C64> {
        self.states.iter().map(|r| (a.matrix() * r).trace()).collect()
    }

    pub fn population(&self, k: usize) -> Vec<f64> {
        self.states.iter().map(|r| r[(k, k)].re).collect()
    }

    pub fn last(&self) -> &CMatrix {
        self.states.last().expect("empty trajectory")
    }

    pub fn max_trace_error(&self) -> f64 {
        self.states
            .iter()
            .map(|r| (r.trace() - ONE).norm())
            .fold(0.0, f64::max)
    }

    pub fn max_hermiticity_error(&self) -> f64 {
        self.states
            .iter()
            .map(|r| max_abs_diff(r, &r.adjoint()))
            .fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.states
            .iter()
            .map(min_eigenvalue_hermitian)
            .fold(f64::INFINITY, f64::min)
    }

    /// Fails when an invariant is broken by more than ten times its tolerance.
    pub fn check_invariants(&self, positivity: bool) -> Result<()> {
        let tr = self.max_trace_error();
        let herm = self.max_hermiticity_error();
        if !(tr <= 1e-7) || !(herm <= 1e-9) {
            return Err(Error::Numerical(format!(
                "integrator step too large: trace error {tr:e}, hermiticity error {herm:e}"
            )));
        }
        if positivity {
            let m = self.min_eigenvalue();
            if !(m >= -1e-6) {
                return Err(Error::Numerical(format!(
                    "integrator step too large: min eigenvalue {m:e}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_matrix(d: usize, seed: &[f64]) -> CMatrix {
        CMatrix::from_fn(d, d, |i, j| {
            let k = 2 * (i * d + j);
            c(seed[k % seed.len()], seed[(k + 1) % seed.len()])
        })
    }

    #[test]
    fn identity_commutator_is_zero() {
        let s = commutator_super(&Operator::identity(3));
        assert!(s.matrix().iter().all(|z| z.norm() == 0.0));
        let a = anticommutator_super(&Operator::identity(3));
        assert_eq!(a.matrix(), &(CMatrix::identity(9, 9) * re(2.0)));
    }

    #[test]
    fn pauli_commutator() {
        let sx = Operator::sigma_x();
        let out = commutator_super(&Operator::sigma_z()).apply(sx.matrix());
        let expected = Operator::sigma_y().matrix() * c(0.0, 2.0);
        assert!(max_abs_diff(&out, &expected) < 1e-15);
    }

    #[test]
    fn trace_norm_examples() {
        assert!((trace_norm(&CMatrix::identity(2, 2)).unwrap() - 2.0).abs() < 1e-14);
        assert!((trace_norm(Operator::sigma_z().matrix()).unwrap() - 2.0).abs() < 1e-14);
        let n = Operator::from_real_rows(2, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((trace_norm(n.matrix()).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn operator_rejects_bad_input() {
        assert!(Operator::new(CMatrix::zeros(2, 3)).is_err());
        assert!(Operator::new(CMatrix::zeros(0, 0)).is_err());
        let mut m = CMatrix::zeros(2, 2);
        m[(0, 1)] = c(f64::NAN, 0.0);
        assert!(Operator::new(m).is_err());
    }

    #[test]
    fn density_matrix_validation() {
        assert!(DensityMatrix::pure(&[ONE, ONE]).is_ok());
        let bad_trace = CMatrix::identity(2, 2);
        assert!(DensityMatrix::from_matrix(bad_trace).is_err());
        let negative = CMatrix::from_diagonal(&CVector::from_vec(vec![re(1.5), re(-0.5)]));
        assert!(DensityMatrix::from_matrix(negative).is_err());
        let mut nonherm = CMatrix::identity(2, 2) * re(0.5);
        nonherm[(0, 1)] = re(0.1);
        assert!(DensityMatrix::from_matrix(nonherm).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(0.0, 0.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 0.1, 0).is_err());
        let g = TimeGrid::from_t_max(1.0, 0.3).unwrap();
        assert_eq!(g.n_steps, 3);
        assert!((g.t_end() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rk4_zero_rhs_is_constant() {
        let g = TimeGrid::new(0.0, 0.1, 20).unwrap();
        let traj = integrate(|_, _, dy| dy.fill(ZERO), &[c(0.3, -0.2)], &g, 1).unwrap();
        assert!(traj.iter().all(|y| y[0] == c(0.3, -0.2)));
    }

    #[test]
    fn rk4_exponential_decay() {
        let g = TimeGrid::from_t_max(1.0, 0.01).unwrap();
        let traj = integrate(|_, y, dy| dy[0] = -y[0], &[ONE], &g, 1).unwrap();
        let err = (traj.last().unwrap()[0].re - (-1.0f64).exp()).abs();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn rk4_phase_rotation_preserves_modulus() {
        let w = 3.0;
        let g = TimeGrid::from_t_max(2.0, 0.01).unwrap();
        let traj = integrate(|_, y, dy| dy[0] = I * w * y[0], &[ONE], &g, 1).unwrap();
        for y in &traj {
            assert!((y[0].norm() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn rk4_fourth_order() {
        let err = |dt: f64| {
            let g = TimeGrid::from_t_max(1.0, dt).unwrap();
            let traj = integrate(|_, y, dy| dy[0] = -y[0], &[ONE], &g, 1).unwrap();
            (traj.last().unwrap()[0].re - (-1.0f64).exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn integrate_reports_non_finite_step() {
        let g = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let res = integrate(
            |t, _, dy| dy[0] = if t >= 2.0 { c(f64::INFINITY, 0.0) } else { ZERO },
            &[ONE],
            &g,
            1,
        );
        assert_eq!(res.unwrap_err(), Error::NonFinite { step: 2, time: 2.0 });
    }

    proptest! {
        #[test]
        fn vec_roundtrip(vals in prop::collection::vec(-5.0f64..5.0, 32), d in 1usize..4) {
            let a = random_matrix(d, &vals);
            prop_assert_eq!(unvec(&vec(&a), d), a);
        }

        #[test]
        fn commutator_super_matches_direct(vals in prop::collection::vec(-1.0f64..1.0, 64), d in prop::sample::select(vec![2usize, 4])) {
            let a = random_matrix(d, &vals);
            let rho = random_matrix(d, &vals[3..]);
            let s = commutator_super(&Operator::new(a.clone()).unwrap());
            let direct = &a * &rho - &rho * &a;
            prop_assert!(max_abs_diff(&s.apply(&rho), &direct) < 1e-13);
            let s = anticommutator_super(&Operator::new(a.clone()).unwrap());
            let direct = &a * &rho + &rho * &a;
            prop_assert!(max_abs_diff(&s.apply(&rho), &direct) < 1e-13);
        }

        #[test]
        fn trace_norm_is_a_norm(vals in prop::collection::vec(-1.0f64..1.0, 48), s in -3.0f64..3.0) {
            let a = random_matrix(3, &vals);
            let b = random_matrix(3, &vals[5..]);
            let na = trace_norm(&a).unwrap();
            let nb = trace_norm(&b).unwrap();
            prop_assert!(na >= 0.0);
            prop_assert!((trace_norm(&(&a * re(s))).unwrap() - s.abs() * na).abs() < 1e-12 * (1.0 + na));
            prop_assert!(trace_norm(&(&a + &b)).unwrap() <= na + nb + 1e-12);
        }
    }
}
