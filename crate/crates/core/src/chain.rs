//! Orthogonal-polynomial bath discretization and the star-to-chain map.
//!
//! The support `[0, ω_c]` is rescaled to `[0, 1]`; recurrence coefficients
//! live on the rescaled axis and `ω_c` converts them back to frequencies.
//! `β_0 = ∫J dω` is the zeroth moment, so the system couples to the first
//! chain site with strength `√β_0`.

use nalgebra::{DMatrix, DVector};

use crate::bath::{SpectralDensity, SpectralKind};
use crate::error::{Error, Result};
use crate::linalg::{c, TimeGrid, C64};
use crate::quad;

#[derive(Clone, Debug, PartialEq)]
pub struct ChainCoefficients {
    /// `α_0..α_{N−1}` on the rescaled axis.
    pub alphas: Vec<f64>,
    /// `β_0 = ∫J dω`, then `β_1..β_{N−1}` on the rescaled axis.
    pub betas: Vec<f64>,
    /// Frequency rescale `ω_c`.
    pub omega_c: f64,
}

impl ChainCoefficients {
    pub fn order(&self) -> usize {
        self.alphas.len()
    }

    pub fn sys_coupling(&self) -> f64 {
        self.betas[0].sqrt()
    }

    /// Site energies `A_n = ω_c α_n`.
    pub fn energies(&self) -> Vec<f64> {
        self.alphas.iter().map(|a| self.omega_c * a).collect()
    }

    /// Hoppings `B_n = ω_c √β_n` between sites `n−1` and `n`, for `n ≥ 1`.
    pub fn hoppings(&self) -> Vec<f64> {
        self.betas[1..].iter().map(|b| self.omega_c * b.sqrt()).collect()
    }

    /// Evaluates the monic polynomials `π_0..π_{N}` at a rescaled frequency.
    pub fn polynomials(&self, x: f64) -> Vec<f64> {
        let n = self.order();
        let mut p = Vec::with_capacity(n + 1);
        p.push(1.0);
        let mut prev = 0.0;
        for k in 0..n {
            let b = if k == 0 { 0.0 } else { self.betas[k] };
            let next = (x - self.alphas[k]) * p[k] - b * prev;
            prev = p[k];
            p.push(next);
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StarDiscretization {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl StarDiscretization {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }
}

/// Tight-binding chain: the system couples to site 0 with `coupling`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainHamiltonian {
    pub coupling: f64,
    pub energies: Vec<f64>,
    pub hoppings: Vec<f64>,
}

/// Discrete measure `(x_i, w_i J̃(x_i))` on the rescaled axis.
fn fine_measure(j: &SpectralDensity, n: usize) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let top = j.quadrature_max();
    if !top.is_finite() || matches!(j.kind, SpectralKind::Drude { .. }) && j.omega_max.is_none() {
        return Err(Error::Domain(
            "chain mapping needs a spectral density with finite support; set omega_max".into(),
        ));
    }
    let rule = quad::rule16();
    let target = (8 * n).max(512);
    let mut edges: Vec<(f64, f64)> = Vec::new();
    if let SpectralKind::Tabulated { omega, .. } = &j.kind {
        let mut pts: Vec<f64> = omega.iter().cloned().filter(|&w| w <= top).collect();
        if *pts.last().unwrap() < top {
            pts.push(top);
        }
        let per = (target / (rule.len() * (pts.len() - 1))).max(1) + 1;
        for w in pts.windows(2) {
            let h = (w[1] - w[0]) / per as f64;
            for k in 0..per {
                edges.push((w[0] + k as f64 * h, w[0] + (k + 1) as f64 * h));
            }
        }
    } else {
        let panels = target.div_ceil(rule.len());
        let width = (top / panels as f64).min(j.feature_width());
        edges = quad::panels(0.0, top, width, true);
    }
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    for (a, b) in edges {
        for (w, wt) in rule.mapped(a, b) {
            let v = j.eval(w)? * wt;
            if v > 0.0 {
                xs.push(w / top);
                ws.push(v);
            }
        }
    }
    if xs.len() < 2 * n {
        return Err(Error::Domain(format!(
            "spectral density has too few support points ({}) for order {n}",
            xs.len()
        )));
    }
    Ok((xs, ws, top))
}

/// Three-term recurrence coefficients of the monic polynomials orthogonal
/// under `J`, by the discretized Stieltjes procedure in normalized form.
pub fn recurrence_coefficients(j: &SpectralDensity, n: usize) -> Result<ChainCoefficients> {
    if n == 0 {
        return Err(Error::Domain("order must be at least 1".into()));
    }
    let (x, w, omega_c) = fine_measure(j, n)?;
    let m = x.len();
    let beta0: f64 = w.iter().sum();
    let mut alphas = Vec::with_capacity(n);
    let mut betas = vec![beta0];
    let mut q = vec![1.0 / beta0.sqrt(); m];
    let mut q_prev = vec![0.0; m];
    for k in 0..n {
        let a: f64 = (0..m).map(|i| w[i] * x[i] * q[i] * q[i]).sum();
        alphas.push(a);
        if k + 1 == n {
            break;
        }
        let sb = if k == 0 { 0.0 } else { betas[k].sqrt() };
        let mut next: Vec<f64> = (0..m).map(|i| (x[i] - a) * q[i] - sb * q_prev[i]).collect();
        // one reorthogonalization pass against the two previous vectors
        for prev in [&q, &q_prev] {
            let proj: f64 = (0..m).map(|i| w[i] * next[i] * prev[i]).sum();
            for i in 0..m {
                next[i] -= proj * prev[i];
            }
        }
        let b: f64 = (0..m).map(|i| w[i] * next[i] * next[i]).sum();
        if !(b > 1e-28) {
            return Err(Error::RecurrenceBreakdown { n: k + 1, value: b });
        }
        let s = b.sqrt();
        next.iter_mut().for_each(|v| *v /= s);
        betas.push(b);
        q_prev = std::mem::replace(&mut q, next);
    }
    Ok(ChainCoefficients {
        alphas,
        betas,
        omega_c,
    })
}

/// Gauss nodes and weights from the Jacobi matrix of the coefficients.
pub fn gauss_discretize(coeffs: &ChainCoefficients) -> Result<StarDiscretization> {
    let n = coeffs.order();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        jac[(k, k)] = coeffs.alphas[k];
        if k + 1 < n {
            let b = coeffs.betas[k + 1].sqrt();
            jac[(k, k + 1)] = b;
            jac[(k + 1, k)] = b;
        }
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|p| {
            let v = eig.eigenvectors[(0, p)];
            (eig.eigenvalues[p] * coeffs.omega_c, coeffs.betas[0] * v * v)
        })
        .collect();
    if pairs.iter().any(|(x, w)| !x.is_finite() || !w.is_finite()) {
        return Err(Error::Numerical("Jacobi eigen-decomposition failed".into()));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(StarDiscretization {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    })
}

pub fn star_to_chain(coeffs: &ChainCoefficients) -> ChainHamiltonian {
    ChainHamiltonian {
        coupling: coeffs.sys_coupling(),
        energies: coeffs.energies(),
        hoppings: coeffs.hoppings(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainPropagation {
    pub times: Vec<f64>,
    /// Lab-frame amplitude on the system site.
    pub amplitude: Vec<C64>,
    pub max_norm_error: f64,
    /// Estimated time at which the excitation returns from the chain end.
    pub recurrence_time: Option<f64>,
}

/// Population on the last chain site that counts as reaching the end.
pub const END_POPULATION: f64 = 1e-8;

fn propagate_dense(h: DMatrix<f64>, grid: &TimeGrid, last: usize) -> ChainPropagation {
    let d = h.nrows();
    let eig = h.symmetric_eigen();
    let v0: DVector<f64> = eig.eigenvectors.row(0).transpose();
    let mut amplitude = Vec::with_capacity(grid.len());
    let mut max_norm_error: f64 = 0.0;
    let mut reach = None;
    for t in grid.times() {
        let phases: Vec<C64> = (0..d)
            .map(|k| C64::from_polar(v0[k], -eig.eigenvalues[k] * t))
            .collect();
        let mut norm = 0.0;
        let mut a0 = C64::new(0.0, 0.0);
        let mut end = 0.0;
        for i in 0..d {
            let mut s = c(0.0, 0.0);
            for k in 0..d {
                s += phases[k] * eig.eigenvectors[(i, k)];
            }
            norm += s.norm_sqr();
            if i == 0 {
                a0 = s;
            }
            if i == last {
                end = s.norm_sqr();
            }
        }
        max_norm_error = max_norm_error.max((norm - 1.0).abs());
        if reach.is_none() && end > END_POPULATION {
            reach = Some(t);
        }
        amplitude.push(a0);
    }
    ChainPropagation {
        times: grid.times(),
        amplitude,
        max_norm_error,
        recurrence_time: reach.map(|t| 2.0 * t),
    }
}

/// Exact one-excitation dynamics of a level `ω_s` coupled to the first
/// `n_sites` sites of the chain, starting with the excitation on the system.
pub fn chain_propagate_one_excitation(
    omega_s: f64,
    chain: &ChainHamiltonian,
    n_sites: usize,
    grid: &TimeGrid,
) -> Result<ChainPropagation> {
    if n_sites == 0 || n_sites > chain.energies.len() {
        return Err(Error::Domain(format!(
            "n_sites must be in 1..={}, got {n_sites}",
            chain.energies.len()
        )));
    }
    let d = n_sites + 1;
    let mut h = DMatrix::<f64>::zeros(d, d);
    h[(0, 0)] = omega_s;
    h[(0, 1)] = chain.coupling;
    h[(1, 0)] = chain.coupling;
    for k in 0..n_sites {
        h[(k + 1, k + 1)] = chain.energies[k];
        if k + 1 < n_sites {
            h[(k + 1, k + 2)] = chain.hoppings[k];
            h[(k + 2, k + 1)] = chain.hoppings[k];
        }
    }
    Ok(propagate_dense(h, grid, n_sites))
}

/// Same dynamics with the system coupled directly to the discrete star modes.
pub fn star_propagate_one_excitation(omega_s: f64, star: &StarDiscretization, grid: &TimeGrid) -> ChainPropagation {
    let n = star.order();
    let mut h = DMatrix::<f64>::zeros(n + 1, n + 1);
    h[(0, 0)] = omega_s;
    for p in 0..n {
        h[(p + 1, p + 1)] = star.nodes[p];
        let g = star.weights[p].sqrt();
        h[(0, p + 1)] = g;
        h[(p + 1, 0)] = g;
    }
    let mut out = propagate_dense(h, grid, n);
    out.recurrence_time = None;
    out
}

/// CSV rows `n,alpha_n,beta_n,omega_p,W_p,A_n,B_n`; `B_0` is the system coupling.
pub fn chain_csv(coeffs: &ChainCoefficients, star: &StarDiscretization) -> String {
    let mut s = String::from("n,alpha_n,beta_n,omega_p,W_p,A_n,B_n\n");
    let energies = coeffs.energies();
    for k in 0..coeffs.order() {
        let b = if k == 0 {
            coeffs.sys_coupling()
        } else {
            coeffs.omega_c * coeffs.betas[k].sqrt()
        };
        s.push_str(&format!(
            "{k},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            coeffs.alphas[k], coeffs.betas[k], star.nodes[k], star.weights[k], energies[k], b
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::correlation_zero_t;
    use crate::exact::one_excitation_amplitude;
    use proptest::prelude::*;

    fn flat() -> SpectralDensity {
        SpectralDensity::tabulated(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn flat_weight_recurrence() {
        let co = recurrence_coefficients(&flat(), 21).unwrap();
        assert!((co.betas[0] - 1.0).abs() < 1e-13);
        for n in 0..=20 {
            assert!((co.alphas[n] - 0.5).abs() < 1e-12, "alpha_{n} = {}", co.alphas[n]);
            if n >= 1 {
                let nf = n as f64;
                let exact = nf * nf / (4.0 * (4.0 * nf * nf - 1.0));
                assert!((co.betas[n] - exact).abs() < 1e-10, "beta_{n}");
            }
        }
        assert!((co.betas[1] - 1.0 / 12.0).abs() < 1e-12);
        let p = co.polynomials(0.3);
        assert_eq!(p[0], 1.0);
        assert!((p[1] - (0.3 - co.alphas[0])).abs() < 1e-15);
    }

    #[test]
    fn flat_chain_constants() {
        let co = recurrence_coefficients(&flat(), 60).unwrap();
        let ch = star_to_chain(&co);
        assert!((ch.coupling - 1.0).abs() < 1e-12);
        assert!(ch.energies.iter().all(|a| (a - 0.5).abs() < 1e-10));
        assert!((ch.hoppings[49] - 0.25).abs() < 1e-3);
    }

    #[test]
    fn gauss_rule_is_exact_on_moments() {
        let co = recurrence_coefficients(&flat(), 10).unwrap();
        let star = gauss_discretize(&co).unwrap();
        let total: f64 = star.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
        for k in 0..20 {
            let m: f64 = star.nodes.iter().zip(&star.weights).map(|(x, w)| w * x.powi(k)).sum();
            let exact = 1.0 / (k as f64 + 1.0);
            assert!((m - exact).abs() < 1e-8 * exact, "moment {k}");
        }
        assert!(star.nodes.windows(2).all(|w| w[0] < w[1]));
        assert!(star.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn single_node_sits_at_the_mean_frequency() {
        let j = SpectralDensity::ohmic(1.0, 0.3, 2.0).unwrap();
        let co = recurrence_coefficients(&j, 1).unwrap();
        let star = gauss_discretize(&co).unwrap();
        let total = j.integral().unwrap();
        let mean = j.integrate_weighted(|w| w).unwrap() / total;
        assert!((star.nodes[0] - mean).abs() < 1e-9 * mean);
        assert!((star.weights[0] - total).abs() < 1e-10 * total);
    }

    #[test]
    fn polynomials_are_orthogonal() {
        let j = SpectralDensity::ohmic_hard(0.5, 1.0, 3.0).unwrap();
        let co = recurrence_coefficients(&j, 9).unwrap();
        let gram = |n: usize, m: usize| {
            j.integrate_weighted(|w| {
                let p = co.polynomials(w / co.omega_c);
                p[n] * p[m]
            })
            .unwrap()
        };
        for n in 0..=8 {
            let scale = gram(n, n);
            for m in 0..n {
                assert!(gram(n, m).abs() < 1e-8 * scale, "<{n},{m}>");
            }
        }
    }

    #[test]
    fn nodes_interlace() {
        let j = SpectralDensity::ohmic(1.0, 0.5, 1.0).unwrap();
        let co = recurrence_coefficients(&j, 12).unwrap();
        let mut small = co.clone();
        small.alphas.truncate(11);
        small.betas.truncate(11);
        let a = gauss_discretize(&small).unwrap().nodes;
        let b = gauss_discretize(&co).unwrap().nodes;
        for k in 0..a.len() {
            assert!(b[k] < a[k] && a[k] < b[k + 1]);
        }
    }

    #[test]
    fn star_and_chain_are_equivalent() {
        let j = SpectralDensity::ohmic(1.0, 0.2, 1.0).unwrap();
        let co = recurrence_coefficients(&j, 40).unwrap();
        let star = gauss_discretize(&co).unwrap();
        let grid = TimeGrid::from_t_max(30.0, 0.05).unwrap();
        let a = chain_propagate_one_excitation(1.0, &star_to_chain(&co), 40, &grid).unwrap();
        let b = star_propagate_one_excitation(1.0, &star, &grid);
        let diff = a.amplitude.iter().zip(&b.amplitude).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
        assert!(a.max_norm_error < 1e-10);
    }

    #[test]
    fn uncoupled_system_keeps_its_amplitude() {
        let ch = ChainHamiltonian {
            coupling: 0.0,
            energies: vec![0.5; 5],
            hoppings: vec![0.25; 4],
        };
        let grid = TimeGrid::new(0.0, 0.1, 50).unwrap();
        let p = chain_propagate_one_excitation(1.0, &ch, 5, &grid).unwrap();
        assert!(p.amplitude.iter().all(|a| (a.norm() - 1.0).abs() < 1e-12));
        assert!(p.recurrence_time.is_none());
    }

    #[test]
    fn long_chain_matches_volterra() {
        let j = SpectralDensity::lorentzian(0.2, 5.0, 0.5, 10.0).unwrap();
        let omega_s = 5.0;
        let co = recurrence_coefficients(&j, 200).unwrap();
        let grid = TimeGrid::from_t_max(16.0, 0.01).unwrap();
        let chain = chain_propagate_one_excitation(omega_s, &star_to_chain(&co), 200, &grid).unwrap();
        let alpha = |t: f64| correlation_zero_t(&j, t).unwrap() * C64::from_polar(1.0, omega_s * t);
        let exact = one_excitation_amplitude(alpha, &grid).unwrap().with_system_frequency(omega_s);
        let horizon = chain.recurrence_time.unwrap_or(f64::INFINITY);
        let mut worst: f64 = 0.0;
        for ((t, a), b) in grid.times().iter().zip(&chain.amplitude).zip(exact.u()) {
            if *t <= horizon {
                worst = worst.max((a - b).norm());
            }
        }
        assert!(worst < 1e-3, "{worst}");
        assert!(chain.max_norm_error < 1e-10);
    }

    #[test]
    fn recurrence_is_detected_on_short_chains() {
        let co = recurrence_coefficients(&flat(), 10).unwrap();
        let grid = TimeGrid::from_t_max(200.0, 0.1).unwrap();
        let p = chain_propagate_one_excitation(0.5, &star_to_chain(&co), 10, &grid).unwrap();
        assert!(p.recurrence_time.is_some());
    }

    #[test]
    fn open_drude_is_rejected() {
        let j = SpectralDensity::drude(0.1, 1.0).unwrap();
        assert!(recurrence_coefficients(&j, 4).is_err());
    }

    #[test]
    fn csv_has_one_row_per_order() {
        let co = recurrence_coefficients(&flat(), 4).unwrap();
        let star = gauss_discretize(&co).unwrap();
        let text = chain_csv(&co, &star);
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("n,alpha_n,beta_n,omega_p,W_p,A_n,B_n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn betas_stay_positive(s in 0.3f64..3.0, wc in 0.5f64..4.0, n in 1usize..30) {
            let j = SpectralDensity::ohmic(s, 0.1, wc).unwrap();
            let co = recurrence_coefficients(&j, n).unwrap();
            prop_assert!(co.betas.iter().all(|&b| b > 0.0));
            prop_assert!(co.alphas.iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
    }
}
