//! Small numerical kernels shared across modules: deterministic summation,
//! dense Cholesky for the handful of tiny SPD systems the oracle needs, and
//! Gauss–Hermite quadrature against the standard normal.

use std::sync::OnceLock;

use crate::error::{Error, Result};

const PAIRWISE_BLOCK: usize = 16;

/// Pairwise (tree) summation with a fixed split rule.
///
/// The reduction order depends only on `xs.len()`, never on thread count.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pairwise sum of `f(x)` over `xs`, same split rule as [`pairwise_sum`].
pub fn pairwise_sum_by(xs: &[f64], f: &impl Fn(f64) -> f64) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        let mut acc = 0.0;
        for &x in xs {
            acc += f(x);
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum_by(&xs[..mid], f) + pairwise_sum_by(&xs[mid..], f)
}

pub fn pairwise_mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Correctly rounded sum (Shewchuk's non-overlapping partials).
///
/// Because the result is the exact sum rounded once, it is invariant under
/// any permutation of the input.
pub fn exact_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::with_capacity(32);
    for mut x in xs {
        let mut used = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[used] = lo;
                used += 1;
            }
            x = hi;
        }
        partials.truncate(used);
        partials.push(x);
    }

    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    // Round-half-even correction when the remaining partials push past a tie.
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

/// `expm1(x) / x`, continuous at zero.
pub fn exprel(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 + 0.5 * x
    } else {
        x.exp_m1() / x
    }
}

/// Lower Cholesky factor of a row-major symmetric `dim × dim` matrix.
///
/// Positive semidefinite inputs that are numerically singular are retried
/// with a diagonal jitter growing from 0 to `1e-10 · max(1, max diag)`.
pub fn cholesky_psd(a: &[f64], dim: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), dim * dim, "matrix shape");
    let scale = (0..dim).map(|i| a[i * dim + i]).fold(1.0_f64, f64::max);
    for jitter in [0.0, 1e-14, 1e-12, 1e-10] {
        if let Some(l) = cholesky_with_jitter(a, dim, jitter * scale) {
            return Ok(l);
        }
    }
    Err(Error::Covariance(format!(
        "{dim}x{dim} matrix is not positive semidefinite within jitter 1e-10"
    )))
}

fn cholesky_with_jitter(a: &[f64], dim: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = a[i * dim + j];
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * dim + i] = s.sqrt();
            } else {
                l[i * dim + j] = s / l[j * dim + j];
            }
        }
    }
    Some(l)
}

/// `out = L z` for a row-major lower-triangular `L`.
pub fn lower_mul(l: &[f64], z: &[f64], out: &mut [f64]) {
    let dim = z.len();
    for i in 0..dim {
        let mut s = 0.0;
        for k in 0..=i {
            s += l[i * dim + k] * z[k];
        }
        out[i] = s;
    }
}

/// Solve `A x = b` for symmetric positive definite `A` (row-major).
pub fn solve_spd(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let dim = b.len();
    let l = cholesky_psd(a, dim)?;
    let mut y = vec![0.0; dim];
    for i in 0..dim {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * dim + k] * y[k];
        }
        y[i] = s / l[i * dim + i];
    }
    let mut x = vec![0.0; dim];
    for i in (0..dim).rev() {
        let mut s = y[i];
        for k in i + 1..dim {
            s -= l[k * dim + i] * x[k];
        }
        x[i] = s / l[i * dim + i];
    }
    Ok(x)
}

/// Inverse of an SPD matrix, used for regression standard errors.
pub fn inverse_spd(a: &[f64], dim: usize) -> Result<Vec<f64>> {
    let mut inv = vec![0.0; dim * dim];
    for c in 0..dim {
        let mut e = vec![0.0; dim];
        e[c] = 1.0;
        let col = solve_spd(a, &e)?;
        for r in 0..dim {
            inv[r * dim + c] = col[r];
        }
    }
    Ok(inv)
}

pub const MAX_GAUSS_HERMITE_ORDER: usize = 350;

/// Nodes and weights with `Σ w_i f(x_i) ≈ E[f(Z)]`, `Z ~ N(0, 1)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Nodes are eigenvalues of the probabilists' Jacobi matrix, polished by
    /// Newton on the orthonormal recurrence; weights are the reciprocal
    /// Christoffel function `1 / Σ_k p_k(x)²`. Orders above 350 would
    /// overflow that sum at the outer nodes and are rejected.
    pub fn new(order: usize) -> Self {
        assert!((1..=MAX_GAUSS_HERMITE_ORDER).contains(&order), "Gauss-Hermite order {order} outside 1..=350");
        let n = order;
        let mut diag = vec![0.0; n];
        let mut off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
        off.push(0.0);
        tridiagonal_eigenvalues(&mut diag, &mut off);
        diag.sort_by(|a, b| a.total_cmp(b));

        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Fold onto the non-negative half so the rule is exactly symmetric.
            let mut z = 0.5 * (diag[n - 1 - i] - diag[i]);
            if n % 2 == 1 && i == n / 2 {
                z = 0.0;
            }
            for _ in 0..3 {
                let (p, dp, _) = hermite_orthonormal(z, n);
                if dp == 0.0 {
                    break;
                }
                z -= p / dp;
            }
            let (_, _, christoffel) = hermite_orthonormal(z, n);
            nodes[n - 1 - i] = z;
            nodes[i] = -z;
            weights[i] = 1.0 / christoffel;
            weights[n - 1 - i] = weights[i];
        }
        let total = exact_sum(weights.iter().copied());
        for w in &mut weights {
            *w /= total;
        }
        GaussHermite { nodes, weights }
    }

    /// The 201-point rule, built once.
    pub fn standard() -> &'static GaussHermite {
        static RULE: OnceLock<GaussHermite> = OnceLock::new();
        RULE.get_or_init(|| GaussHermite::new(201))
    }

    /// The 151-point rule, used as a convergence cross-check.
    pub fn coarse() -> &'static GaussHermite {
        static RULE: OnceLock<GaussHermite> = OnceLock::new();
        RULE.get_or_init(|| GaussHermite::new(151))
    }

    /// `E[f(mean + sd · Z)]`.
    pub fn expect(&self, mean: f64, sd: f64, f: impl Fn(f64) -> f64) -> f64 {
        let terms = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(mean + sd * x));
        exact_sum(terms)
    }
}

/// Orthonormal probabilists' Hermite `p_n(x)`, its derivative, and
/// `Σ_{k<n} p_k(x)²`.
fn hermite_orthonormal(x: f64, n: usize) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut dprev = 0.0;
    let mut dcur = 0.0;
    let mut sumsq = 0.0;
    for k in 0..n {
        sumsq += cur * cur;
        let kf = k as f64;
        let next = (x * cur - kf.sqrt() * prev) / (kf + 1.0).sqrt();
        let dnext = (cur + x * dcur - kf.sqrt() * dprev) / (kf + 1.0).sqrt();
        prev = cur;
        cur = next;
        dprev = dcur;
        dcur = dnext;
    }
    (cur, dcur, sumsq)
}

/// Eigenvalues of a symmetric tridiagonal matrix by implicit QL.
///
/// `d` holds the diagonal and is overwritten with the eigenvalues; `e[i]`
/// is the coupling between rows `i` and `i + 1` (last entry unused).
fn tridiagonal_eigenvalues(d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter < 60, "QL iteration did not converge");
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut underflow = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
}

/// Raw moments `E[(mean + sd Z)^k]` for `k = 0..=max_k`.
pub fn gaussian_raw_moments(mean: f64, var: f64, max_k: usize) -> Vec<f64> {
    // M_k = mean · M_{k-1} + (k - 1) var · M_{k-2}
    let mut m = vec![0.0; max_k + 1];
    m[0] = 1.0;
    if max_k >= 1 {
        m[1] = mean;
    }
    for k in 2..=max_k {
        m[k] = mean * m[k - 1] + (k as f64 - 1.0) * var * m[k - 2];
    }
    m
}

/// Binomial coefficient as `f64` for the small arguments used here.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c.round()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_sum_handles_cancellation() {
        let xs = [1e100, 1.0, -1e100, 1e-3];
        assert_eq!(exact_sum(xs), 1.001);
        assert_eq!(exact_sum(Vec::<f64>::new()), 0.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
    }

    #[test]
    fn pairwise_sum_matches_exact_on_integers() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }

    #[test]
    fn cholesky_reconstructs_and_accepts_singular_psd() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky_psd(&a, 2).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-15);
        assert!((l[2] - 1.0).abs() < 1e-15);
        assert!((l[3] - 2f64.sqrt()).abs() < 1e-15);
        // rank one
        let b = [1.0, 1.0, 1.0, 1.0];
        assert!(cholesky_psd(&b, 2).is_ok());
        let bad = [1.0, 2.0, 2.0, 1.0];
        assert!(matches!(cholesky_psd(&bad, 2), Err(Error::Covariance(_))));
    }

    #[test]
    fn solve_spd_small_system() {
        let a = [4.0, 1.0, 1.0, 3.0];
        let x = solve_spd(&a, &[1.0, 2.0]).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-14);
        assert!((x[0] + 3.0 * x[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn gauss_hermite_integrates_gaussian_moments() {
        for rule in [GaussHermite::standard(), GaussHermite::coarse(), &GaussHermite::new(7)] {
            let total: f64 = rule.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-13, "{total}");
            assert!((rule.expect(0.0, 1.0, |x| x * x) - 1.0).abs() < 1e-12);
            assert!((rule.expect(0.0, 1.0, |x| x.powi(4)) - 3.0).abs() < 1e-11);
            assert!((rule.expect(0.0, 1.0, |x| x.powi(6)) - 15.0).abs() < 1e-10);
        }
        let gh = GaussHermite::standard();
        let e_cos = gh.expect(0.0, 1.0, f64::cos);
        assert!((e_cos - (-0.5f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn gaussian_moment_recursion() {
        let m = gaussian_raw_moments(0.0, 1.0, 8);
        assert_eq!(m, vec![1.0, 0.0, 1.0, 0.0, 3.0, 0.0, 15.0, 0.0, 105.0]);
        let m = gaussian_raw_moments(2.0, 0.5, 3);
        // E[X^3] = mu^3 + 3 mu var
        assert!((m[3] - (8.0 + 3.0)).abs() < 1e-14);
    }

    #[test]
    fn exprel_is_continuous() {
        assert_eq!(exprel(0.0), 1.0);
        assert!((exprel(1e-9) - 1.0).abs() < 1e-8);
        assert!((exprel(1.0) - (std::f64::consts::E - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(6, 3), 20.0);
        assert_eq!(binomial(10, 0), 1.0);
        assert_eq!(binomial(3, 5), 0.0);
    }
}
