//! One-dimensional empirical measures: exact Wasserstein distances, moments,
//! path-coupling statistics and smooth functionals `h(⟨m, ψ⟩)`.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::model_lq::InitialLaw;
use crate::numeric::exact_sum;
use crate::particle_systems::ParticlePaths;
use crate::stats::Estimate;
use crate::stochastic_kernel::{NormalStream, SeedRecord, StreamDomain};

/// Uniform empirical measure on a sample, with a lazily built sorted copy.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure1D {
    samples: Vec<f64>,
    sorted: OnceLock<Vec<f64>>,
}

impl EmpiricalMeasure1D {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("empirical measure with non-finite atom {bad}")));
        }
        Ok(EmpiricalMeasure1D {
            samples,
            sorted: OnceLock::new(),
        })
    }

    pub fn from_slice(samples: &[f64]) -> Result<Self> {
        Self::new(samples.to_vec())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Atoms in nondecreasing order; sorted once and cached.
    pub fn sorted(&self) -> &[f64] {
        self.sorted.get_or_init(|| {
            let mut s = self.samples.clone();
            s.sort_unstable_by(f64::total_cmp);
            s
        })
    }
}

/// `W_p` between two empirical measures with the same number of atoms.
///
/// In one dimension the monotone rearrangement is an optimal coupling, so
/// this is `((1/n) Σ |a₍ᵢ₎ − b₍ᵢ₎|^p)^{1/p}` over the sorted atoms.
pub fn wasserstein_1d(p: u32, a: &EmpiricalMeasure1D, b: &EmpiricalMeasure1D) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("Wasserstein distance of an empty measure".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Unsupported(format!(
            "Wasserstein distance needs equal sample counts, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let pairs = a.sorted().iter().zip(b.sorted());
    let n = a.len() as f64;
    match p {
        1 => Ok(exact_sum(pairs.map(|(x, y)| (x - y).abs())) / n),
        2 => Ok((exact_sum(pairs.map(|(x, y)| (x - y) * (x - y))) / n).sqrt()),
        _ => Err(Error::Unsupported(format!("W_p only for p in {{1, 2}}, got {p}"))),
    }
}

/// Largest moment order accepted by [`moment`].
pub const MAX_EMPIRICAL_MOMENT: u32 = 8;

/// `(1/n) Σ xᵢ^k`, correctly rounded before the division.
pub fn moment(m: &EmpiricalMeasure1D, k: u32) -> Result<f64> {
    if k > MAX_EMPIRICAL_MOMENT {
        return Err(Error::Range(format!("moment order {k} above {MAX_EMPIRICAL_MOMENT}")));
    }
    if m.is_empty() {
        return Err(Error::Domain("moment of an empty measure".into()));
    }
    Ok(exact_sum(m.samples.iter().map(|x| x.powi(k as i32))) / m.len() as f64)
}

/// Gap statistics between two coupled systems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingStats {
    /// `(1/n) Σᵢ sup_k |Aⁱ − Bⁱ|²`.
    pub mean_sq_sup: f64,
    /// `(1/n) Σᵢ sup_k |Aⁱ − Bⁱ|`.
    pub mean_sup: f64,
    /// `W₂` between the two terminal empirical measures.
    pub w2_final: f64,
}

/// Running per-particle grid supremum of `|Aⁱ − Bⁱ|`, fed one row at a time.
#[derive(Debug, Clone)]
pub struct SupGapTracker {
    sup: Vec<f64>,
}

impl SupGapTracker {
    pub fn new(n: usize) -> Self {
        SupGapTracker { sup: vec![0.0; n] }
    }

    #[inline]
    pub fn update(&mut self, a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), self.sup.len());
        assert_eq!(b.len(), self.sup.len());
        for ((s, x), y) in self.sup.iter_mut().zip(a).zip(b) {
            *s = s.max((x - y).abs());
        }
    }

    pub fn sups(&self) -> &[f64] {
        &self.sup
    }

    pub fn mean_sq_sup(&self) -> f64 {
        exact_sum(self.sup.iter().map(|s| s * s)) / self.sup.len() as f64
    }

    pub fn mean_sup(&self) -> f64 {
        exact_sum(self.sup.iter().copied()) / self.sup.len() as f64
    }
}

pub fn path_coupling_stats(a: &ParticlePaths, b: &ParticlePaths) -> Result<CouplingStats> {
    if a.grid() != b.grid() || a.n_particles() != b.n_particles() {
        return Err(Error::Construction("coupled paths differ in shape".into()));
    }
    let mut tracker = SupGapTracker::new(a.n_particles());
    for k in 0..=a.grid().n_steps() {
        tracker.update(a.row(k), b.row(k));
    }
    let w2 = wasserstein_1d(
        2,
        &EmpiricalMeasure1D::from_slice(a.terminal())?,
        &EmpiricalMeasure1D::from_slice(b.terminal())?,
    )?;
    Ok(CouplingStats {
        mean_sq_sup: tracker.mean_sq_sup(),
        mean_sup: tracker.mean_sup(),
        w2_final: w2,
    })
}

/// Scalar building blocks of a [`MeasureFunctional`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scalar {
    Identity,
    Tanh,
    Constant(f64),
    Sin,
}

impl Scalar {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Scalar::Identity => x,
            Scalar::Tanh => x.tanh(),
            Scalar::Constant(c) => c,
            Scalar::Sin => x.sin(),
        }
    }
}

/// `f(m) = h(⟨m, ψ⟩)` with declared bounds on `|h′|` and `|h″|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureFunctional {
    h: Scalar,
    psi: Scalar,
    h1_bound: f64,
    h2_bound: f64,
}

/// Range `[−R, R]` of `⟨m, ψ⟩` over which the bounds on `h` are probed.
const FUNCTIONAL_PROBE_RANGE: f64 = 10.0;

impl MeasureFunctional {
    /// Finite-difference probe of `h′` and `h″` on 401 points of `[−10, 10]`.
    pub fn new(h: Scalar, psi: Scalar, h1_bound: f64, h2_bound: f64) -> Result<Self> {
        let step = 1e-4;
        let slack = |b: f64| b * (1.0 + 1e-3) + 1e-6;
        for j in 0..=400 {
            let x = -FUNCTIONAL_PROBE_RANGE + 0.05 * j as f64;
            let (lo, mid, hi) = (h.eval(x - step), h.eval(x), h.eval(x + step));
            let d1 = (hi - lo) / (2.0 * step);
            let d2 = (hi - 2.0 * mid + lo) / (step * step);
            if d1.abs() > slack(h1_bound) || d2.abs() > slack(h2_bound) {
                return Err(Error::Domain(format!(
                    "h' = {d1}, h'' = {d2} at {x} exceed declared bounds ({h1_bound}, {h2_bound})"
                )));
            }
        }
        Ok(MeasureFunctional {
            h,
            psi,
            h1_bound,
            h2_bound,
        })
    }

    /// `m ↦ ⟨m, x⟩`.
    pub fn mean() -> Self {
        Self::new(Scalar::Identity, Scalar::Identity, 1.0, 0.0).expect("identity bounds")
    }

    /// `m ↦ tanh(⟨m, x⟩)`; `|tanh″| ≤ 4/(3√3)`.
    pub fn tanh_of_mean() -> Self {
        Self::new(Scalar::Tanh, Scalar::Identity, 1.0, 4.0 / (3.0 * 3f64.sqrt())).expect("tanh bounds")
    }

    pub fn constant(c: f64) -> Self {
        Self::new(Scalar::Constant(c), Scalar::Identity, 0.0, 0.0).expect("constant bounds")
    }

    pub fn derivative_bounds(&self) -> (f64, f64) {
        (self.h1_bound, self.h2_bound)
    }

    pub fn eval(&self, m: &EmpiricalMeasure1D) -> f64 {
        let psi = self.psi;
        let inner = exact_sum(m.samples().iter().map(|&x| psi.eval(x))) / m.len() as f64;
        self.h.eval(inner)
    }

    /// `f(μ₀)`, with `⟨μ₀, ψ⟩` exact for the identity and by quadrature otherwise.
    pub fn at_law(&self, mu0: &InitialLaw) -> Result<f64> {
        let inner = match self.psi {
            Scalar::Identity => mu0.mean(),
            Scalar::Constant(c) => c,
            psi => mu0.as_mixture().expect(|x| psi.eval(x), 1e-10)?,
        };
        Ok(self.h.eval(inner))
    }
}

/// Monte Carlo `E[|f(mⁿ) − f(μ₀)|⁴]^{1/4}` over `replications` i.i.d.
/// samples of size `n`, with a delta-method standard error.
///
/// Replication `r` draws from the sampling stream of `(seed, r)`, so a
/// smaller `n` uses a prefix of the same sample.
pub fn l4_functional_error(
    f: &MeasureFunctional,
    mu0: &InitialLaw,
    n: usize,
    replications: usize,
    seed: u64,
) -> Result<Estimate> {
    if n == 0 || replications < 2 {
        return Err(Error::Domain(format!(
            "need n >= 1 and at least two replications, got n={n}, M={replications}"
        )));
    }
    let reference = f.at_law(mu0)?;
    let mut buf = vec![0.0; n];
    let fourth: Vec<f64> = (0..replications as u64)
        .map(|r| {
            let mut stream = NormalStream::new(
                SeedRecord {
                    base_seed: seed,
                    replication_id: r,
                },
                StreamDomain::Sampling,
                0,
            );
            stream.fill_normal(&mut buf);
            for v in buf.iter_mut() {
                *v = mu0.from_normal(*v);
            }
            let m = EmpiricalMeasure1D::from_slice(&buf)?;
            Ok((f.eval(&m) - reference).powi(4))
        })
        .collect::<Result<_>>()?;
    let e4 = crate::stats::estimate(&fourth);
    let value = e4.mean.powf(0.25);
    let se = if value > 0.0 {
        e4.se / (4.0 * value.powi(3))
    } else {
        0.0
    };
    Ok(Estimate { mean: value, se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(xs: &[f64]) -> EmpiricalMeasure1D {
        EmpiricalMeasure1D::from_slice(xs).unwrap()
    }

    #[test]
    fn two_atom_example() {
        let d = wasserstein_1d(2, &m(&[0.0, 1.0]), &m(&[0.0, 2.0])).unwrap();
        // Brute force over both pairings of the atoms.
        let straight = ((0.0f64 - 0.0).powi(2) + (1.0f64 - 2.0).powi(2)) / 2.0;
        let crossed = ((0.0f64 - 2.0).powi(2) + (1.0f64 - 0.0).powi(2)) / 2.0;
        assert_eq!(straight.min(crossed), 0.5);
        assert!((d - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(wasserstein_1d(2, &m(&[0.0, 2.0]), &m(&[0.0, 2.0])).unwrap(), 0.0);
    }

    #[test]
    fn wasserstein_errors() {
        assert!(matches!(wasserstein_1d(1, &m(&[]), &m(&[])), Err(Error::Domain(_))));
        assert!(matches!(wasserstein_1d(1, &m(&[1.0]), &m(&[1.0, 2.0])), Err(Error::Unsupported(_))));
        assert!(wasserstein_1d(3, &m(&[1.0]), &m(&[2.0])).is_err());
        assert!(EmpiricalMeasure1D::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn moments_by_hand() {
        assert_eq!(moment(&m(&[-1.0, 1.0]), 2).unwrap(), 1.0);
        assert_eq!(moment(&m(&[-1.0, 1.0]), 0).unwrap(), 1.0);
        assert_eq!(moment(&m(&[1.0, 2.0, 3.0]), 3).unwrap(), 12.0);
        assert!(moment(&m(&[1.0]), 9).is_err());
    }

    #[test]
    fn functional_bounds_are_probed() {
        assert!(MeasureFunctional::new(Scalar::Tanh, Scalar::Identity, 0.5, 1.0).is_err());
        assert!(MeasureFunctional::new(Scalar::Sin, Scalar::Identity, 1.0, 1.0).is_ok());
        let f = MeasureFunctional::tanh_of_mean();
        assert!((f.eval(&m(&[0.2, 0.4])) - 0.3f64.tanh()).abs() < 1e-15);
        let law = InitialLaw::Gaussian { mean: 0.3, var: 2.0 };
        let g = MeasureFunctional::new(Scalar::Identity, Scalar::Sin, 1.0, 0.0).unwrap();
        let exact = 0.3f64.sin() * (-1.0f64).exp();
        assert!((g.at_law(&law).unwrap() - exact).abs() < 1e-10);
    }

    #[test]
    fn constant_functional_has_zero_error() {
        let e = l4_functional_error(&MeasureFunctional::constant(2.5), &InitialLaw::standard_gaussian(), 10, 20, 1)
            .unwrap();
        assert_eq!(e.mean, 0.0);
    }

    #[test]
    fn mean_functional_matches_gaussian_fourth_moment() {
        let n = 50;
        let e = l4_functional_error(&MeasureFunctional::mean(), &InitialLaw::standard_gaussian(), n, 4000, 9)
            .unwrap();
        let exact = (3.0 / (n * n) as f64).powf(0.25);
        assert!((e.mean - exact).abs() < 3.0 * e.se, "{e:?} vs {exact}");
    }

    #[test]
    fn sup_tracker_statistics() {
        let mut t = SupGapTracker::new(2);
        t.update(&[0.0, 1.0], &[1.0, 1.0]);
        t.update(&[0.0, 3.0], &[0.5, 1.0]);
        assert_eq!(t.sups(), &[1.0, 2.0]);
        assert_eq!(t.mean_sq_sup(), 2.5);
        assert_eq!(t.mean_sup(), 1.5);
    }

    fn sample(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, len)
    }

    proptest! {
        #[test]
        fn metric_properties((a, b, c) in (1usize..40).prop_flat_map(|n| (sample(n), sample(n), sample(n)))) {
            let (ma, mb, mc) = (m(&a), m(&b), m(&c));
            for p in [1, 2] {
                let ab = wasserstein_1d(p, &ma, &mb).unwrap();
                let ba = wasserstein_1d(p, &mb, &ma).unwrap();
                let ac = wasserstein_1d(p, &ma, &mc).unwrap();
                let cb = wasserstein_1d(p, &mc, &mb).unwrap();
                prop_assert_eq!(ab, ba);
                prop_assert!(ab <= ac + cb + 1e-12);
                prop_assert_eq!(wasserstein_1d(p, &ma, &ma).unwrap(), 0.0);
            }
            prop_assert!(wasserstein_1d(1, &ma, &mb).unwrap() <= wasserstein_1d(2, &ma, &mb).unwrap() * (1.0 + 1e-12));
        }

        #[test]
        fn translation_moves_by_the_shift(a in sample(17), shift in -5.0f64..5.0) {
            let b: Vec<f64> = a.iter().map(|x| x + shift).collect();
            for p in [1, 2] {
                let d = wasserstein_1d(p, &m(&a), &m(&b)).unwrap();
                prop_assert!((d - shift.abs()).abs() < 1e-12);
            }
        }

        #[test]
        fn moments_ignore_order(mut a in sample(25), k in 0u32..=8) {
            let before = moment(&m(&a), k).unwrap();
            a.reverse();
            a.rotate_left(7);
            prop_assert_eq!(before, moment(&m(&a), k).unwrap());
        }
    }
}
