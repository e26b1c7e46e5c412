//! The three coupled n-particle systems of the LQ model, plus a generic
//! mean-field drift interface.
//!
//! * Nash: `dXⁱ = cₙ(t)(X̄ − Xⁱ)dt + σdBⁱ + σ₀dW`
//! * McKean–Vlasov proxy: the same with the limit rate `c(t)`
//! * hat: `dX̂ⁱ = c(t)(μ̄_t − X̂ⁱ)dt + σdBⁱ + σ₀dW`, `μ̄_t = μ̄₀ + σ₀W_t`
//!
//! All three read the same [`BrownianBundle`], so they share initial states
//! and every increment. Empirical means use the fixed-order pairwise sum.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model_lq::{drift_rate_mkv, drift_rate_nash, ModelParams};
use crate::numeric::{pairwise_mean, pairwise_sum, pairwise_sum_by};
use crate::stochastic_kernel::{euler_step, BrownianBundle, SeedRecord, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SystemTag {
    Nash,
    Mkv,
    Hat,
    Generic,
}

impl SystemTag {
    pub fn label(self) -> &'static str {
        match self {
            SystemTag::Nash => "nash",
            SystemTag::Mkv => "mkv",
            SystemTag::Hat => "hat",
            SystemTag::Generic => "generic",
        }
    }
}

/// Trajectories of one system; `states` is row-major `[(n_steps + 1) × n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticlePaths {
    grid: TimeGrid,
    n_particles: usize,
    states: Vec<f64>,
    tag: SystemTag,
    seed: SeedRecord,
}

impl ParticlePaths {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn tag(&self) -> SystemTag {
        self.tag
    }

    pub fn seed(&self) -> SeedRecord {
        self.seed
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// All particle states at grid index `k`.
    pub fn row(&self, k: usize) -> &[f64] {
        &self.states[k * self.n_particles..(k + 1) * self.n_particles]
    }

    pub fn terminal(&self) -> &[f64] {
        self.row(self.grid.n_steps())
    }

    /// Trajectory of one particle over the grid.
    pub fn path(&self, particle: usize) -> Vec<f64> {
        (0..=self.grid.n_steps()).map(|k| self.row(k)[particle]).collect()
    }

    /// Cross-sectional mean at each grid index.
    pub fn mean_path(&self) -> Vec<f64> {
        (0..=self.grid.n_steps()).map(|k| pairwise_mean(self.row(k))).collect()
    }
}

/// `X₀ⁱ` derived from the bundle's per-particle initial normals.
pub fn initial_states(p: &ModelParams, bundle: &BrownianBundle) -> Vec<f64> {
    bundle
        .initial_normals()
        .iter()
        .map(|&z| p.mu0.from_normal(z))
        .collect()
}

fn check_dims(n: usize, bundle: &BrownianBundle) -> Result<()> {
    if n == 0 || n != bundle.n_particles() {
        return Err(Error::Construction(format!(
            "system of {n} particles cannot use a bundle of {} particles",
            bundle.n_particles()
        )));
    }
    Ok(())
}

/// Explicit Euler stepper for one of the LQ systems, advancing in place.
///
/// Large experiments drive this directly and reduce each row on the fly
/// instead of storing [`ParticlePaths`].
#[derive(Debug, Clone)]
pub struct LqStepper {
    tag: SystemTag,
    params: ModelParams,
    /// Mean-reversion rate at the left end of each step.
    rates: Vec<f64>,
    /// Hat system only: `μ̄_{t_k}` at each step.
    targets: Option<Vec<f64>>,
    state: Vec<f64>,
    k: usize,
}

impl LqStepper {
    pub fn new(tag: SystemTag, p: &ModelParams, bundle: &BrownianBundle) -> Result<Self> {
        Self::with_initial(tag, p, bundle, initial_states(p, bundle))
    }

    /// Start from explicit initial states instead of the bundle's.
    pub fn with_initial(
        tag: SystemTag,
        p: &ModelParams,
        bundle: &BrownianBundle,
        state: Vec<f64>,
    ) -> Result<Self> {
        p.check_domain()?;
        let n = state.len();
        check_dims(n, bundle)?;
        let grid = bundle.grid();
        if (grid.horizon() - p.horizon).abs() > 1e-12 * p.horizon {
            return Err(Error::Construction(format!(
                "bundle horizon {} differs from model horizon {}",
                grid.horizon(),
                p.horizon
            )));
        }
        let steps = grid.n_steps();
        let rates = (0..steps)
            .map(|k| {
                let t = grid.time(k);
                match tag {
                    SystemTag::Nash => drift_rate_nash(t, n, p),
                    SystemTag::Mkv | SystemTag::Hat => drift_rate_mkv(t, p),
                    SystemTag::Generic => Err(Error::Unsupported(
                        "generic drifts run through simulate_generic_mkv".into(),
                    )),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let targets = (tag == SystemTag::Hat).then(|| {
            let w = bundle.w_path();
            w[..steps].iter().map(|&wk| p.mu0.mean() + p.sigma0 * wk).collect()
        });
        Ok(LqStepper {
            tag,
            params: *p,
            rates,
            targets,
            state,
            k: 0,
        })
    }

    pub fn tag(&self) -> SystemTag {
        self.tag
    }

    /// Grid index of the current state.
    pub fn step_index(&self) -> usize {
        self.k
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.k == self.rates.len()
    }

    /// Advance one grid step using row `k` of the bundle.
    pub fn step(&mut self, bundle: &BrownianBundle) -> Result<()> {
        let k = self.k;
        if k >= self.rates.len() {
            return Err(Error::Range("stepper already reached the horizon".into()));
        }
        let c = self.rates[k];
        let target = match &self.targets {
            Some(t) => t[k],
            None => pairwise_mean(&self.state),
        };
        let dt = bundle.dt();
        let dw = bundle.common()[k];
        let p = &self.params;
        for (x, &db) in self.state.iter_mut().zip(bundle.idio_row(k)) {
            *x = euler_step(*x, c * (target - *x), db, dw, dt, p)?;
        }
        self.k += 1;
        Ok(())
    }
}

fn run_to_paths(mut stepper: LqStepper, bundle: &BrownianBundle) -> Result<ParticlePaths> {
    let n = stepper.state.len();
    let steps = bundle.n_steps();
    let mut states = Vec::with_capacity((steps + 1) * n);
    states.extend_from_slice(stepper.state());
    while !stepper.is_done() {
        stepper.step(bundle)?;
        states.extend_from_slice(stepper.state());
    }
    Ok(ParticlePaths {
        grid: *bundle.grid(),
        n_particles: n,
        states,
        tag: stepper.tag,
        seed: bundle.seed(),
    })
}

pub fn simulate_nash(p: &ModelParams, n: usize, bundle: &BrownianBundle) -> Result<ParticlePaths> {
    check_dims(n, bundle)?;
    run_to_paths(LqStepper::new(SystemTag::Nash, p, bundle)?, bundle)
}

pub fn simulate_mkv_proxy(p: &ModelParams, n: usize, bundle: &BrownianBundle) -> Result<ParticlePaths> {
    check_dims(n, bundle)?;
    run_to_paths(LqStepper::new(SystemTag::Mkv, p, bundle)?, bundle)
}

/// Hat system; `w_path` must be the cumulative common noise of `bundle`.
pub fn simulate_hat(
    p: &ModelParams,
    n: usize,
    bundle: &BrownianBundle,
    w_path: &[f64],
) -> Result<ParticlePaths> {
    check_dims(n, bundle)?;
    let own = bundle.w_path();
    if w_path.len() != own.len() || w_path.iter().zip(&own).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Construction(
            "w_path is not the common noise of this bundle".into(),
        ));
    }
    run_to_paths(LqStepper::new(SystemTag::Hat, p, bundle)?, bundle)
}

/// Nash, MKV proxy and hat paths driven by one bundle.
pub fn simulate_coupled_triple(
    p: &ModelParams,
    n: usize,
    bundle: &BrownianBundle,
) -> Result<(ParticlePaths, ParticlePaths, ParticlePaths)> {
    let nash = simulate_nash(p, n, bundle)?;
    let mkv = simulate_mkv_proxy(p, n, bundle)?;
    let hat = simulate_hat(p, n, bundle, &bundle.w_path())?;
    Ok((nash, mkv, hat))
}

/// CSV diagnostic dump: `step,time,particle,x_nash,x_mkv,x_hat`.
pub fn write_triple_csv<W: Write>(
    nash: &ParticlePaths,
    mkv: &ParticlePaths,
    hat: &ParticlePaths,
    mut out: W,
) -> Result<()> {
    let n = nash.n_particles;
    if mkv.n_particles != n || hat.n_particles != n || mkv.grid != nash.grid || hat.grid != nash.grid {
        return Err(Error::Construction("paths do not share a shape".into()));
    }
    writeln!(out, "step,time,particle,x_nash,x_mkv,x_hat")?;
    for k in 0..=nash.grid.n_steps() {
        let t = nash.grid.time(k);
        let (a, b, c) = (nash.row(k), mkv.row(k), hat.row(k));
        for i in 0..n {
            writeln!(out, "{k},{t:.12e},{i},{:.17e},{:.17e},{:.17e}", a[i], b[i], c[i])?;
        }
    }
    Ok(())
}

/// Mean-field drift `b̂(t, x, features)` reading empirical raw moments.
pub trait MeanFieldDrift {
    /// Moment orders (each in `1..=4`) the drift reads, in the order they
    /// are passed to [`MeanFieldDrift::drift`].
    fn features(&self) -> &[usize];

    fn drift(&self, t: f64, x: f64, features: &[f64]) -> f64;
}

/// Largest moment order a drift may declare.
pub const MAX_FEATURE_ORDER: usize = 4;

/// A closure-backed drift whose Lipschitz constant is probed at construction.
pub struct FeatureDrift<F> {
    features: Vec<usize>,
    lipschitz: f64,
    f: F,
}

/// Half-width of the box on which the Lipschitz claim is probed.
const PROBE_RADIUS: f64 = 5.0;
const PROBE_POINTS: usize = 41;
const PROBE_STEP: f64 = 1e-6;
/// Relative slack on the declared constant, covering finite-difference error.
const PROBE_SLACK: f64 = 1e-3;

impl<F: Fn(f64, f64, &[f64]) -> f64> FeatureDrift<F> {
    /// Finite differences in `x` and in every feature, on a grid of
    /// `[−5, 5]` per coordinate and a handful of times in `[0, horizon]`,
    /// must stay below `lipschitz · (1 + 1e-3)`.
    pub fn new(features: Vec<usize>, lipschitz: f64, horizon: f64, f: F) -> Result<Self> {
        if let Some(&bad) = features.iter().find(|&&k| k == 0 || k > MAX_FEATURE_ORDER) {
            return Err(Error::Domain(format!("feature order {bad} outside 1..=4")));
        }
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(Error::Domain(format!("invalid Lipschitz constant {lipschitz}")));
        }
        let drift = FeatureDrift {
            features,
            lipschitz,
            f,
        };
        drift.probe(horizon)?;
        Ok(drift)
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn probe(&self, horizon: f64) -> Result<()> {
        let dim = 1 + self.features.len();
        let bound = self.lipschitz * (1.0 + PROBE_SLACK) + 1e-9;
        let coord = |j: usize| -PROBE_RADIUS + 2.0 * PROBE_RADIUS * j as f64 / (PROBE_POINTS - 1) as f64;
        let mut point = vec![0.0; dim];
        for ti in 0..5 {
            let t = horizon * ti as f64 / 4.0;
            for j in 0..PROBE_POINTS {
                // A diagonal sweep plus an anti-diagonal one keeps the probe
                // linear in the number of features.
                for sweep in [1.0, -1.0] {
                    for (d, v) in point.iter_mut().enumerate() {
                        let s = if d % 2 == 0 { 1.0 } else { sweep };
                        *v = s * coord(j);
                    }
                    for d in 0..dim {
                        let mut hi = point.clone();
                        let mut lo = point.clone();
                        hi[d] += PROBE_STEP;
                        lo[d] -= PROBE_STEP;
                        let fh = (self.f)(t, hi[0], &hi[1..]);
                        let fl = (self.f)(t, lo[0], &lo[1..]);
                        let slope = (fh - fl) / (2.0 * PROBE_STEP);
                        if !slope.is_finite() || slope.abs() > bound {
                            return Err(Error::Domain(format!(
                                "drift slope {slope} in coordinate {d} at t={t}, point {point:?} \
                                 exceeds declared Lipschitz constant {}",
                                self.lipschitz
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl<F: Fn(f64, f64, &[f64]) -> f64> MeanFieldDrift for FeatureDrift<F> {
    fn features(&self) -> &[usize] {
        &self.features
    }

    #[inline]
    fn drift(&self, t: f64, x: f64, features: &[f64]) -> f64 {
        (self.f)(t, x, features)
    }
}

/// The LQ mean-field drift `c(t)(m̄ − x)` as a [`MeanFieldDrift`].
pub fn lq_mkv_drift(p: &ModelParams) -> Result<FeatureDrift<impl Fn(f64, f64, &[f64]) -> f64>> {
    p.check_domain()?;
    let params = *p;
    let steps = 1000;
    let sup_rate = (0..=steps)
        .map(|k| drift_rate_mkv(p.horizon * k as f64 / steps as f64, p).map(f64::abs))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    // The rate is smooth in t, so a small margin covers the sampling gap.
    FeatureDrift::new(vec![1], sup_rate * 1.01, p.horizon, move |t, x, m| {
        let c = drift_rate_mkv(t.clamp(0.0, params.horizon), &params).unwrap_or(f64::NAN);
        c * (m[0] - x)
    })
}

fn empirical_moment(xs: &[f64], k: usize) -> f64 {
    let sum = match k {
        1 => pairwise_sum(xs),
        2 => pairwise_sum_by(xs, &|x| x * x),
        3 => pairwise_sum_by(xs, &|x| x * x * x),
        _ => pairwise_sum_by(xs, &|x| x.powi(k as i32)),
    };
    sum / xs.len() as f64
}

/// Euler paths of `dXⁱ = b̂(t, Xⁱ, features(mⁿ))dt + σdBⁱ + σ₀dW`.
///
/// With [`lq_mkv_drift`] this performs exactly the arithmetic of
/// [`simulate_mkv_proxy`] and returns bit-identical states.
pub fn simulate_generic_mkv<D: MeanFieldDrift + ?Sized>(
    drift: &D,
    p: &ModelParams,
    n: usize,
    bundle: &BrownianBundle,
) -> Result<ParticlePaths> {
    p.check_domain()?;
    check_dims(n, bundle)?;
    let grid = *bundle.grid();
    let steps = grid.n_steps();
    let dt = grid.dt();
    let orders = drift.features().to_vec();
    let mut x = initial_states(p, bundle);
    let mut states = Vec::with_capacity((steps + 1) * n);
    states.extend_from_slice(&x);
    let mut feats = vec![0.0; orders.len()];
    for k in 0..steps {
        let t = grid.time(k);
        for (f, &order) in feats.iter_mut().zip(&orders) {
            *f = empirical_moment(&x, order);
        }
        let dw = bundle.common()[k];
        for (i, (xi, &db)) in x.iter_mut().zip(bundle.idio_row(k)).enumerate() {
            let b = drift.drift(t, *xi, &feats);
            if !b.is_finite() {
                return Err(Error::Numeric(format!(
                    "drift returned {b} at step {k} (t = {t}), particle {i}, x = {}",
                    *xi
                )));
            }
            *xi = euler_step(*xi, b, db, dw, dt, p)?;
        }
        states.extend_from_slice(&x);
    }
    Ok(ParticlePaths {
        grid,
        n_particles: n,
        states,
        tag: SystemTag::Generic,
        seed: bundle.seed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_lq::InitialLaw;
    use crate::stochastic_kernel::make_bundle;

    fn bundle(n: usize, steps: usize, rep: u64) -> BrownianBundle {
        make_bundle(11, rep, TimeGrid::new(1.0, steps).unwrap(), n).unwrap()
    }

    #[test]
    fn single_particle_is_pure_noise() {
        let p = ModelParams::baseline();
        let b = bundle(1, 50, 0);
        let w = b.w_path();
        let bp = b.b_path(0);
        for paths in [simulate_nash(&p, 1, &b).unwrap(), simulate_mkv_proxy(&p, 1, &b).unwrap()] {
            let x0 = paths.row(0)[0];
            for k in 0..=50 {
                let expected = x0 + p.sigma * bp[k] + p.sigma0 * w[k];
                assert!((paths.row(k)[0] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nash_mean_follows_the_noise_average() {
        let p = ModelParams::baseline();
        let n = 64;
        let b = bundle(n, 200, 3);
        let paths = simulate_nash(&p, n, &b).unwrap();
        let w = b.w_path();
        let means = paths.mean_path();
        let bsum: Vec<Vec<f64>> = (0..n).map(|i| b.b_path(i)).collect();
        for k in 0..=200 {
            let avg_b = bsum.iter().map(|bp| bp[k]).sum::<f64>() / n as f64;
            let lhs = means[k] - means[0] - p.sigma0 * w[k];
            assert!((lhs - p.sigma * avg_b).abs() < 1e-12, "step {k}");
        }
    }

    #[test]
    fn noiseless_common_start_is_constant() {
        let p = ModelParams {
            sigma: 0.0,
            sigma0: 0.0,
            mu0: InitialLaw::point_mass(0.7),
            ..ModelParams::baseline()
        };
        let b = bundle(5, 30, 0);
        let (nash, mkv, hat) = simulate_coupled_triple(&p, 5, &b).unwrap();
        for paths in [&nash, &mkv, &hat] {
            assert!(paths.states().iter().all(|&x| x == 0.7));
        }
    }

    #[test]
    fn coupled_systems_share_initial_states() {
        let p = ModelParams::baseline();
        let b = bundle(20, 10, 1);
        let (nash, mkv, hat) = simulate_coupled_triple(&p, 20, &b).unwrap();
        assert_eq!(nash.row(0), mkv.row(0));
        assert_eq!(nash.row(0), hat.row(0));
    }

    #[test]
    fn hat_with_quiet_common_noise_targets_the_initial_mean() {
        let p = ModelParams {
            sigma0: 0.0,
            mu0: InitialLaw::point_mass(0.0),
            ..ModelParams::baseline()
        };
        let b = bundle(3, 40, 2);
        let hat = simulate_hat(&p, 3, &b, &b.w_path()).unwrap();
        // Independent OU paths: particle 0 must not depend on the others.
        let solo = make_bundle(11, 2, TimeGrid::new(1.0, 40).unwrap(), 1).unwrap();
        let alone = simulate_hat(&p, 1, &solo, &solo.w_path()).unwrap();
        assert_eq!(hat.path(0), alone.path(0));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let p = ModelParams::baseline();
        let b = bundle(4, 10, 0);
        assert!(matches!(simulate_nash(&p, 5, &b), Err(Error::Construction(_))));
        let other = bundle(4, 10, 1);
        assert!(simulate_hat(&p, 4, &b, &other.w_path()).is_err());
    }

    #[test]
    fn generic_lq_drift_matches_proxy_bitwise() {
        let p = ModelParams::baseline();
        let b = bundle(33, 100, 5);
        let drift = lq_mkv_drift(&p).unwrap();
        let generic = simulate_generic_mkv(&drift, &p, 33, &b).unwrap();
        let proxy = simulate_mkv_proxy(&p, 33, &b).unwrap();
        assert_eq!(generic.states(), proxy.states());
    }

    #[test]
    fn zero_drift_gives_cumulated_noise() {
        let p = ModelParams::baseline();
        let b = bundle(4, 25, 0);
        let drift = FeatureDrift::new(vec![], 0.0, 1.0, |_, _, _| 0.0).unwrap();
        let paths = simulate_generic_mkv(&drift, &p, 4, &b).unwrap();
        let w = b.w_path();
        for i in 0..4 {
            let bp = b.b_path(i);
            let x0 = paths.row(0)[i];
            for k in 0..=25 {
                assert!((paths.row(k)[i] - (x0 + p.sigma * bp[k] + p.sigma0 * w[k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tanh_interaction_stays_finite() {
        let p = ModelParams::baseline();
        let b = bundle(50, 1000, 0);
        let drift = FeatureDrift::new(vec![1], 1.0, 1.0, |_, x, m| (m[0] - x).tanh()).unwrap();
        let paths = simulate_generic_mkv(&drift, &p, 50, &b).unwrap();
        assert!(paths.states().iter().all(|x| x.is_finite()));
        assert!(paths.mean_path().iter().all(|m| m.abs() < 10.0));
    }

    #[test]
    fn lipschitz_probe_rejects_understated_constants() {
        assert!(FeatureDrift::new(vec![1], 0.5, 1.0, |_, x, m| 2.0 * (m[0] - x)).is_err());
        assert!(FeatureDrift::new(vec![2], 3.0, 1.0, |_, x, m| x * m[0]).is_err());
        assert!(FeatureDrift::new(vec![5], 1.0, 1.0, |_, _, _| 0.0).is_err());
    }

    #[test]
    fn non_finite_drift_reports_context() {
        let p = ModelParams::baseline();
        let b = bundle(2, 5, 0);
        struct Bad;
        impl MeanFieldDrift for Bad {
            fn features(&self) -> &[usize] {
                &[]
            }
            fn drift(&self, t: f64, _: f64, _: &[f64]) -> f64 {
                if t > 0.5 {
                    f64::NAN
                } else {
                    0.0
                }
            }
        }
        match simulate_generic_mkv(&Bad, &p, 2, &b) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("step 3")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn relabelling_particles_permutes_paths() {
        let p = ModelParams::baseline();
        let n = 40;
        let b = bundle(n, 50, 4);
        let perm: Vec<usize> = (0..n).map(|j| (j * 7 + 3) % n).collect();
        let pb = b.permute_particles(&perm).unwrap();
        let x = simulate_nash(&p, n, &b).unwrap();
        let y = simulate_nash(&p, n, &pb).unwrap();
        for k in [0, 25, 50] {
            for (j, &i) in perm.iter().enumerate() {
                assert!((y.row(k)[j] - x.row(k)[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn euler_is_strong_order_one() {
        let p = ModelParams::baseline();
        let n = 50;
        let fine_steps = 1024;
        let factors = [16usize, 8, 4];
        let mut errs = [0.0f64; 3];
        for rep in 0..40 {
            let fine = bundle(n, fine_steps, 100 + rep);
            for (slot, &factor) in factors.iter().enumerate() {
                // Each resolution is compared with its own dt/4 refinement.
                let coarse = fine.coarsen(factor).unwrap();
                let reference = simulate_nash(&p, n, &fine.coarsen(factor / 4).unwrap()).unwrap();
                let paths = simulate_nash(&p, n, &coarse).unwrap();
                let mut sum = 0.0;
                for i in 0..n {
                    let mut sup = 0.0f64;
                    for k in 0..=coarse.n_steps() {
                        sup = sup.max((paths.row(k)[i] - reference.row(4 * k)[i]).abs());
                    }
                    sum += sup;
                }
                errs[slot] += sum / n as f64;
            }
        }
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 1.0).abs() < 0.2, "observed order {order}, errors {errs:?}");
        }
    }
}
