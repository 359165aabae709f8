//! Quadrature helpers: Gauss-Legendre rules, composite panels for oscillatory
//! Fourier integrals, exact Filon sums for piecewise-linear data and the
//! exponential integrals needed by closed-form Drude kernels.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::linalg::{c, C64, ZERO};

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Gauss-Legendre rule on `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    pub fn new(n: usize) -> Self {
        let (nodes, weights) = gauss_legendre(n);
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let h = 0.5 * (b - a);
        let m = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(self.weights.iter())
            .map(move |(&x, &w)| (m + h * x, h * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F, a: f64, b: f64) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

pub fn rule16() -> &'static GaussRule {
    static R: OnceLock<GaussRule> = OnceLock::new();
    R.get_or_init(|| GaussRule::new(16))
}

pub fn rule24() -> &'static GaussRule {
    static R: OnceLock<GaussRule> = OnceLock::new();
    R.get_or_init(|| GaussRule::new(24))
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule (Newton on P_n).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        if d != 0.0 {
            dp = d;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Panel boundaries covering `[a, b]` with width at most `max_width`. With
/// `graded`, panels near `a` shrink geometrically to resolve endpoint
/// singularities such as `ω^s` with small `s`.
pub fn panels(a: f64, b: f64, max_width: f64, graded: bool) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if !(b > a) {
        return out;
    }
    let n = ((b - a) / max_width).ceil().max(1.0) as usize;
    let h = (b - a) / n as f64;
    let mut start = a;
    if graded {
        let first = a + h;
        let mut edges = vec![first];
        let mut e = h;
        for _ in 0..40 {
            e *= 0.25;
            edges.push(a + e);
        }
        edges.reverse();
        let mut lo = a;
        for &hi in &edges {
            out.push((lo, hi));
            lo = hi;
        }
        start = first;
        for k in 1..n {
            let hi = if k + 1 == n { b } else { a + (k + 1) as f64 * h };
            out.push((start, hi));
            start = hi;
        }
        return out;
    }
    for k in 0..n {
        let hi = if k + 1 == n { b } else { a + (k + 1) as f64 * h };
        out.push((start, hi));
        start = hi;
    }
    out
}

/// `∫_a^b f(ω) e^{-iωt} dω` by composite Gauss-Legendre with panels narrower
/// than a quarter period. Returns the value and a residual estimate from a
/// second, higher-order rule on the same panels.
pub fn fourier_integral<F: Fn(f64) -> f64>(
    f: F,
    t: f64,
    a: f64,
    b: f64,
    max_width: f64,
    graded: bool,
) -> (C64, f64) {
    let span = b - a;
    let mut width = (span / 8.0).min(max_width);
    if t.abs() > 0.0 {
        width = width.min(0.5 * PI / t.abs());
    }
    let ps = panels(a, b, width, graded);
    let mut lo = ZERO;
    let mut hi = ZERO;
    for &(pa, pb) in &ps {
        for (x, w) in rule16().mapped(pa, pb) {
            let v = f(x);
            lo += c((x * t).cos(), -(x * t).sin()) * (w * v);
        }
        for (x, w) in rule24().mapped(pa, pb) {
            let v = f(x);
            hi += c((x * t).cos(), -(x * t).sin()) * (w * v);
        }
    }
    (hi, (hi - lo).norm())
}

/// `∫_a^b f(ω) dω` with the same composite scheme.
pub fn real_integral<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    max_width: f64,
    graded: bool,
) -> (f64, f64) {
    let ps = panels(a, b, ((b - a) / 16.0).min(max_width), graded);
    let mut lo = 0.0;
    let mut hi = 0.0;
    for &(pa, pb) in &ps {
        lo += rule16().integrate(&f, pa, pb);
        hi += rule24().integrate(&f, pa, pb);
    }
    (hi, (hi - lo).abs())
}

/// Exact `∫ f(ω) e^{-iωt} dω` for `f` linear between the samples `(x_k, f_k)`.
pub fn filon_linear(x: &[f64], f: &[f64], t: f64) -> C64 {
    let mut acc = ZERO;
    for k in 0..x.len().saturating_sub(1) {
        let a = x[k];
        let h = x[k + 1] - a;
        if h <= 0.0 {
            continue;
        }
        let (fa, fb) = (f[k], f[k + 1]);
        let th = t * h;
        if th.abs() < 1e-4 {
            // Taylor expansion of the segment integral around t h = 0.
            let e = C64::from_polar(1.0, -t * a);
            let m0 = 0.5 * (fa + fb);
            let m1 = (fa + 2.0 * fb) / 6.0;
            let m2 = (fa + 3.0 * fb) / 12.0;
            let m3 = (fa + 4.0 * fb) / 20.0;
            let it = c(0.0, -th);
            acc += e * h * (m0 + it * m1 + it * it * m2 * 0.5 + it * it * it * m3 / 6.0);
            continue;
        }
        // ∫_0^h (fa + s (fb − fa)/h) e^{-it(a+s)} ds
        let e_a = C64::from_polar(1.0, -t * a);
        let it = c(0.0, t);
        let slope = (fb - fa) / h;
        // ∫ e^{-its} ds = (1 − e^{-ith})/(it); ∫ s e^{-its} ds = (1 − e^{-ith}(1 + ith))/(it)²
        let eh = C64::from_polar(1.0, -th);
        let i0 = (C64::new(1.0, 0.0) - eh) / it;
        let i1 = (C64::new(1.0, 0.0) - eh * (C64::new(1.0, 0.0) + it * h)) / (it * it);
        acc += e_a * (i0 * fa + i1 * slope);
    }
    acc
}

/// `e^{x} E1(x)` for `x > 0`.
pub fn exp_e1(x: f64) -> f64 {
    assert!(x > 0.0);
    if x <= 1.0 {
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..60 {
            term *= -x / k as f64;
            sum += term / k as f64;
            if term.abs() < 1e-18 {
                break;
            }
        }
        x.exp() * (-EULER_GAMMA - x.ln() - sum)
    } else {
        // Lentz continued fraction for e^x E1(x) = 1/(x + 1/(1 + 1/(x + 2/(1 + ...
        let tiny = 1e-300;
        let mut b = x + 1.0;
        let mut cc = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (an * d + b);
            cc = b + an / cc;
            let del = cc * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h
    }
}

/// `e^{-x} Ei(x)` for `x > 0`.
pub fn exp_neg_ei(x: f64) -> f64 {
    assert!(x > 0.0);
    if x < 50.0 {
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..400 {
            term *= x / k as f64;
            let add = term / k as f64;
            sum += add;
            if add < 1e-17 * sum.abs() {
                break;
            }
        }
        (-x).exp() * (EULER_GAMMA + x.ln() + sum)
    } else {
        let mut sum = 1.0;
        let mut term = 1.0;
        for k in 1..40 {
            let next = term * k as f64 / x;
            if next > term {
                break;
            }
            term = next;
            sum += term;
            if term < 1e-17 {
                break;
            }
        }
        sum / x
    }
}

/// `∫_0^∞ ω cos(ωt)/(ω² + γ²) dω = −½[e^{−γt}Ei(γt) + e^{γt}Ei(−γt)]` for `t > 0`.
pub fn drude_cosine_integral(gamma: f64, t: f64) -> f64 {
    let x = gamma * t;
    -0.5 * (exp_neg_ei(x) - exp_e1(x))
}

/// Trapezoid rule on uniformly spaced samples.
pub fn trapezoid(y: &[f64], h: f64) -> f64 {
    match y.len() {
        0 | 1 => 0.0,
        n => h * (0.5 * (y[0] + y[n - 1]) + y[1..n - 1].iter().sum::<f64>()),
    }
}

pub fn trapezoid_c(y: &[C64], h: f64) -> C64 {
    match y.len() {
        0 | 1 => ZERO,
        n => (y[1..n - 1].iter().sum::<C64>() + (y[0] + y[n - 1]) * 0.5) * h,
    }
}

/// Five-point derivative stencil on a uniform grid with one-sided closures at the ends.
pub fn derivative_4th(y: &[C64], h: f64) -> Vec<C64> {
    let n = y.len();
    let mut d = vec![ZERO; n];
    if n < 5 {
        for i in 0..n {
            d[i] = if i == 0 {
                (y[1.min(n - 1)] - y[0]) / h
            } else if i == n - 1 {
                (y[i] - y[i - 1]) / h
            } else {
                (y[i + 1] - y[i - 1]) / (2.0 * h)
            };
        }
        return d;
    }
    for i in 2..n - 2 {
        d[i] = (y[i - 2] - y[i - 1] * 8.0 + y[i + 1] * 8.0 - y[i + 2]) / (12.0 * h);
    }
    let fwd = |y: &[C64], i: usize| {
        (y[i] * -25.0 + y[i + 1] * 48.0 - y[i + 2] * 36.0 + y[i + 3] * 16.0 - y[i + 4] * 3.0)
            / (12.0 * h)
    };
    let fwd1 = |y: &[C64], i: usize| {
        (y[i - 1] * -3.0 - y[i] * 10.0 + y[i + 1] * 18.0 - y[i + 2] * 6.0 + y[i + 3]) / (12.0 * h)
    };
    d[0] = fwd(y, 0);
    d[1] = fwd1(y, 1);
    let rev: Vec<C64> = y.iter().rev().cloned().collect();
    d[n - 1] = -fwd(&rev, 0);
    d[n - 2] = -fwd1(&rev, 1);
    d
}


/// Cosine integral `Ci(x)` for `x > 0` (used by tests and tail corrections).
pub fn ci(x: f64) -> f64 {
    if x < 4.0 {
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..60 {
            term *= -x * x / ((2 * k - 1) as f64 * (2 * k) as f64);
            sum += term / (2 * k) as f64;
            if term.abs() < 1e-18 {
                break;
            }
        }
        EULER_GAMMA + x.ln() + sum
    } else {
        // Ci(x) = −Re E1(ix) via complex continued fraction.
        let z = c(0.0, x);
        let one = c(1.0, 0.0);
        let mut b = z + one;
        let mut cc = c(1e300, 0.0);
        let mut d = one / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -((i * i) as f64);
            b += c(2.0, 0.0);
            d = one / (d * an + b);
            cc = b + one * an / cc;
            let del = cc * d;
            h *= del;
            if (del - one).norm() < 1e-16 {
                break;
            }
        }
        let e1 = h * C64::from_polar(1.0, -x);
        -e1.re
    }
}
