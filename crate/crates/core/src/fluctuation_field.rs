//! The fluctuation field `Sⁿ_t = √n(mⁿ_t − μ_t)` tested against smooth
//! functions, the test-function library, and primal weighted Sobolev norms.

use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model_lq::{GaussianMixtureLaw, MeanFieldFlow, ModelParams};
use crate::numeric::exact_sum;
use crate::particle_systems::ParticlePaths;

/// Highest polynomial degree in a shipped test suite.
pub const MAX_SUITE_DEGREE: usize = 6;

/// A test function with its first two derivatives.
#[derive(Debug, Clone, PartialEq)]
pub enum TestFunction {
    /// `x^k`.
    Monomial(usize),
    /// Probabilists' Hermite polynomial `He_k`.
    Hermite(usize),
    /// `exp(−1/(1 − u²))` for `u = (x − center)/width`, `|u| < 1`; zero outside.
    Bump { center: f64, width: f64 },
    /// `Σ aᵢ φᵢ`.
    Combination(Vec<(f64, TestFunction)>),
}

impl TestFunction {
    pub fn label(&self) -> String {
        match self {
            TestFunction::Monomial(k) => format!("x^{k}"),
            TestFunction::Hermite(k) => format!("He{k}"),
            TestFunction::Bump { center, width } => format!("bump({center};{width})"),
            TestFunction::Combination(terms) => terms
                .iter()
                .map(|(a, f)| format!("{a}*{}", f.label()))
                .collect::<Vec<_>>()
                .join("+"),
        }
    }

    /// Coefficients `c₀ … c_K` when the function is a polynomial.
    pub fn polynomial(&self) -> Option<Vec<f64>> {
        match self {
            TestFunction::Monomial(k) => {
                let mut c = vec![0.0; k + 1];
                c[*k] = 1.0;
                Some(c)
            }
            TestFunction::Hermite(k) => Some(hermite_coefficients(*k)),
            TestFunction::Bump { .. } => None,
            TestFunction::Combination(terms) => {
                let mut out: Vec<f64> = Vec::new();
                for (a, f) in terms {
                    let c = f.polynomial()?;
                    if c.len() > out.len() {
                        out.resize(c.len(), 0.0);
                    }
                    for (o, v) in out.iter_mut().zip(c) {
                        *o += a * v;
                    }
                }
                Some(out)
            }
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.derivatives(x)[0]
    }

    pub fn d1(&self, x: f64) -> f64 {
        self.derivatives(x)[1]
    }

    pub fn d2(&self, x: f64) -> f64 {
        self.derivatives(x)[2]
    }

    /// `[φ(x), φ′(x), φ″(x)]`.
    pub fn derivatives(&self, x: f64) -> [f64; 3] {
        match self {
            TestFunction::Monomial(k) => {
                let k = *k as i32;
                let kf = k as f64;
                [
                    x.powi(k),
                    if k >= 1 { kf * x.powi(k - 1) } else { 0.0 },
                    if k >= 2 { kf * (kf - 1.0) * x.powi(k - 2) } else { 0.0 },
                ]
            }
            TestFunction::Hermite(k) => {
                // He_k' = k He_{k-1}
                let he = hermite_values(x, *k);
                let kf = *k as f64;
                [
                    he[*k],
                    if *k >= 1 { kf * he[k - 1] } else { 0.0 },
                    if *k >= 2 { kf * (kf - 1.0) * he[k - 2] } else { 0.0 },
                ]
            }
            TestFunction::Bump { center, width } => {
                let u = (x - center) / width;
                if u.abs() >= 1.0 {
                    return [0.0; 3];
                }
                let s = 1.0 - u * u;
                let g = -1.0 / s;
                let g1 = -2.0 * u / (s * s);
                let g2 = -2.0 * (1.0 + 3.0 * u * u) / (s * s * s);
                let e = g.exp();
                [e, g1 * e / width, (g2 + g1 * g1) * e / (width * width)]
            }
            TestFunction::Combination(terms) => {
                let mut out = [0.0; 3];
                for (a, f) in terms {
                    let d = f.derivatives(x);
                    for (o, v) in out.iter_mut().zip(d) {
                        *o += a * v;
                    }
                }
                out
            }
        }
    }

    /// `⟨μ, φ⟩`: exact moments for polynomials, quadrature otherwise.
    pub fn mean_under(&self, law: &GaussianMixtureLaw) -> Result<f64> {
        if let Some(c) = self.polynomial() {
            let m = law.moments(c.len() - 1);
            return Ok(exact_sum(c.iter().zip(&m).map(|(a, b)| a * b)));
        }
        match self {
            TestFunction::Bump { center, width } => bump_mean(law, *center, *width),
            TestFunction::Combination(terms) => {
                let mut acc = 0.0;
                for (a, f) in terms {
                    acc += a * f.mean_under(law)?;
                }
                Ok(acc)
            }
            _ => unreachable!("polynomials handled above"),
        }
    }
}

/// Coefficients of `He_k` from `He_{j+1} = x He_j − j He_{j−1}`.
fn hermite_coefficients(k: usize) -> Vec<f64> {
    let mut prev = vec![0.0; k + 1];
    let mut cur = vec![0.0; k + 1];
    cur[0] = 1.0;
    for j in 0..k {
        let mut next = vec![0.0; k + 1];
        for i in 0..k {
            next[i + 1] += cur[i];
        }
        for i in 0..=k {
            next[i] -= j as f64 * prev[i];
        }
        prev = cur;
        cur = next;
    }
    cur
}

fn hermite_values(x: f64, k: usize) -> Vec<f64> {
    let mut he = vec![1.0; k + 1];
    if k >= 1 {
        he[1] = x;
    }
    for j in 1..k {
        he[j + 1] = x * he[j] - j as f64 * he[j - 1];
    }
    he
}

/// Tolerance on the quadrature of non-polynomial test functions.
pub const QUADRATURE_TOL: f64 = 1e-8;

/// `∫ bump dμ` by composite Simpson on the support, checked against the rule
/// with half the intervals. Atoms are evaluated directly.
fn bump_mean(law: &GaussianMixtureLaw, center: f64, width: f64) -> Result<f64> {
    let bump = TestFunction::Bump { center, width };
    let smooth = GaussianMixtureLaw::new(law.components().iter().copied().filter(|c| c.var > 0.0).collect());
    let atoms: f64 = law
        .components()
        .iter()
        .filter(|c| c.var == 0.0)
        .map(|c| c.weight * bump.value(c.mean))
        .sum();
    let simpson = |intervals: usize| {
        let a = center - width;
        let h = 2.0 * width / intervals as f64;
        let terms = (0..=intervals).map(|j| {
            let x = a + j as f64 * h;
            let w = if j == 0 || j == intervals {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * bump.value(x) * smooth.density(x)
        });
        exact_sum(terms) * h / 3.0
    };
    let fine = simpson(4096);
    let coarse = simpson(2048);
    if !fine.is_finite() || (fine - coarse).abs() > QUADRATURE_TOL {
        return Err(Error::Numeric(format!(
            "bump quadrature did not converge: {fine} vs {coarse}"
        )));
    }
    Ok(fine + atoms)
}

/// `⟨Sⁿ_t, φ_k⟩` for one replication; `values` is row-major `[times × testfns]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluctuationSample {
    pub times: Vec<f64>,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
    pub n: usize,
    pub replication_id: u64,
}

impl FluctuationSample {
    pub fn value(&self, time_index: usize, testfn_index: usize) -> f64 {
        self.values[time_index * self.labels.len() + testfn_index]
    }
}

/// `√n((1/n)Σφ(xᵢ) − ⟨μ, φ⟩)` for each test function.
pub fn fluctuation_row(states: &[f64], law: &GaussianMixtureLaw, testfns: &[TestFunction]) -> Result<Vec<f64>> {
    let n = states.len() as f64;
    testfns
        .iter()
        .map(|f| {
            let empirical = exact_sum(states.iter().map(|&x| f.value(x))) / n;
            Ok(n.sqrt() * (empirical - f.mean_under(law)?))
        })
        .collect()
}

/// Evaluate the fluctuation field of `paths` at grid times `times`, with
/// `μ_t` conditioned on the realised common noise `w_path`.
pub fn fluctuation_values(
    paths: &ParticlePaths,
    w_path: &[f64],
    testfns: &[TestFunction],
    times: &[f64],
    p: &ModelParams,
) -> Result<FluctuationSample> {
    let flow = MeanFieldFlow::new(p)?;
    fluctuation_values_with(&flow, paths, w_path, testfns, times)
}

/// As [`fluctuation_values`], reusing a precomputed flow.
pub fn fluctuation_values_with(
    flow: &MeanFieldFlow,
    paths: &ParticlePaths,
    w_path: &[f64],
    testfns: &[TestFunction],
    times: &[f64],
) -> Result<FluctuationSample> {
    let grid = paths.grid();
    if w_path.len() != grid.n_steps() + 1 {
        return Err(Error::Construction(format!(
            "common-noise path has {} points, grid has {}",
            w_path.len(),
            grid.n_steps() + 1
        )));
    }
    let mut values = Vec::with_capacity(times.len() * testfns.len());
    for &t in times {
        let k = grid.index_of(t)?;
        let law = flow.law_at(grid.time(k), w_path[k])?;
        values.extend(fluctuation_row(paths.row(k), &law, testfns)?);
    }
    Ok(FluctuationSample {
        times: times.to_vec(),
        labels: testfns.iter().map(TestFunction::label).collect(),
        values,
        n: paths.n_particles(),
        replication_id: paths.seed().replication_id,
    })
}

/// CSV with columns `replication,time,testfn_label,value`.
pub fn write_samples_csv<W: Write>(samples: &[FluctuationSample], mut out: W) -> Result<()> {
    writeln!(out, "replication,time,testfn_label,value")?;
    for s in samples {
        for (i, t) in s.times.iter().enumerate() {
            for (j, label) in s.labels.iter().enumerate() {
                writeln!(out, "{},{t:.12e},{label},{:.17e}", s.replication_id, s.value(i, j))?;
            }
        }
    }
    Ok(())
}

/// Values on the uniform grid `x_i = −L + i·h`, `i = 0..=2L/h`.
#[derive(Debug, Clone, PartialEq)]
pub struct SobolevGridFn {
    half_width: f64,
    h: f64,
    values: Vec<f64>,
}

/// Default truncation half-width.
pub const SOBOLEV_HALF_WIDTH: f64 = 10.0;
/// Default grid spacing.
pub const SOBOLEV_SPACING: f64 = 0.005;

impl SobolevGridFn {
    pub fn new(half_width: f64, h: f64, values: Vec<f64>) -> Result<Self> {
        let intervals = Self::intervals(half_width, h)?;
        if values.len() != intervals + 1 {
            return Err(Error::Construction(format!(
                "grid of {} intervals needs {} values, got {}",
                intervals,
                intervals + 1,
                values.len()
            )));
        }
        Ok(SobolevGridFn {
            half_width,
            h,
            values,
        })
    }

    pub fn from_fn(f: impl Fn(f64) -> f64, half_width: f64, h: f64) -> Result<Self> {
        let intervals = Self::intervals(half_width, h)?;
        let values = (0..=intervals).map(|i| f(-half_width + i as f64 * h)).collect();
        Self::new(half_width, h, values)
    }

    /// Default grid `[−10, 10]`, `h = 0.005`.
    pub fn sample(f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_fn(f, SOBOLEV_HALF_WIDTH, SOBOLEV_SPACING)
    }

    fn intervals(half_width: f64, h: f64) -> Result<usize> {
        if !(half_width > 0.0 && h > 0.0 && half_width.is_finite()) {
            return Err(Error::Construction(format!("bad grid L={half_width}, h={h}")));
        }
        let count = 2.0 * half_width / h;
        let rounded = count.round();
        if (count - rounded).abs() > 1e-9 * count || rounded < 4.0 {
            return Err(Error::Construction(format!(
                "2L/h = {count} is not an integer number (>= 4) of intervals"
            )));
        }
        Ok(rounded as usize)
    }

    pub fn x(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.h
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Highest derivative order in [`sobolev_norm`].
pub const MAX_SOBOLEV_ORDER: usize = 4;

/// `‖g‖_{j,α} = (Σ_{k≤j} ∫ |Dᵏg|² w_α)^{1/2}` with `w_α = 1/(1 + |x|^{2α})`
/// for `α > 0` and `w₀ ≡ 1`.
///
/// Derivatives use second-order central differences with `g` extended by
/// zero past the grid (justified by the boundary-decay check), and each
/// integral is a trapezoid sum.
pub fn sobolev_norm(g: &SobolevGridFn, j: usize, alpha: f64) -> Result<f64> {
    if j > MAX_SOBOLEV_ORDER {
        return Err(Error::Domain(format!("derivative order {j} above {MAX_SOBOLEV_ORDER}")));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("weight exponent must be >= 0, got {alpha}")));
    }
    let v = &g.values;
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak == 0.0 {
        return Ok(0.0);
    }
    let edge = v[0].abs().max(v[v.len() - 1].abs());
    if edge >= 1e-6 * peak {
        return Err(Error::Domain(format!(
            "function has not decayed at ±{}: |g| = {edge:e} vs max {peak:e}",
            g.half_width
        )));
    }
    let h = g.h;
    let len = v.len() as isize;
    let at = |i: isize| if (0..len).contains(&i) { v[i as usize] } else { 0.0 };
    let weight = |x: f64| if alpha == 0.0 { 1.0 } else { 1.0 / (1.0 + x.abs().powf(2.0 * alpha)) };
    let mut total = 0.0;
    for k in 0..=j {
        let terms = (0..len).map(|i| {
            let d = match k {
                0 => at(i),
                1 => (at(i + 1) - at(i - 1)) / (2.0 * h),
                2 => (at(i + 1) - 2.0 * at(i) + at(i - 1)) / (h * h),
                3 => (at(i + 2) - 2.0 * at(i + 1) + 2.0 * at(i - 1) - at(i - 2)) / (2.0 * h * h * h),
                _ => (at(i + 2) - 4.0 * at(i + 1) + 6.0 * at(i) - 4.0 * at(i - 1) + at(i - 2)) / (h * h * h * h),
            };
            let trap = if i == 0 || i == len - 1 { 0.5 } else { 1.0 };
            trap * d * d * weight(g.x(i as usize))
        });
        total += exact_sum(terms) * h;
    }
    Ok(total.sqrt())
}

/// `λ_d = ⌊d/2⌋ + 1`.
pub fn lambda_d(d: usize) -> Result<usize> {
    if d == 0 {
        return Err(Error::Domain("dimension must be >= 1".into()));
    }
    Ok(d / 2 + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteKind {
    Monomial,
    Hermite,
    Bump,
}

impl FromStr for SuiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monomial" => Ok(SuiteKind::Monomial),
            "hermite" => Ok(SuiteKind::Hermite),
            "bump" => Ok(SuiteKind::Bump),
            other => Err(Error::Unsupported(format!("test-function suite `{other}`"))),
        }
    }
}

/// Degrees `0..=max_degree` of the chosen family; for bumps, `max_degree + 1`
/// unit-width bumps centred evenly on `[−2, 2]`.
pub fn make_test_suite(kind: SuiteKind, max_degree: usize) -> Result<Vec<TestFunction>> {
    if max_degree > MAX_SUITE_DEGREE {
        return Err(Error::Domain(format!("suite degree {max_degree} above {MAX_SUITE_DEGREE}")));
    }
    Ok(match kind {
        SuiteKind::Monomial => (0..=max_degree).map(TestFunction::Monomial).collect(),
        SuiteKind::Hermite => (0..=max_degree).map(TestFunction::Hermite).collect(),
        SuiteKind::Bump => (0..=max_degree)
            .map(|i| TestFunction::Bump {
                center: if max_degree == 0 {
                    0.0
                } else {
                    -2.0 + 4.0 * i as f64 / max_degree as f64
                },
                width: 1.0,
            })
            .collect(),
    })
}
