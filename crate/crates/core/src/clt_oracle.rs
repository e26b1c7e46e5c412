//! Gaussian fluctuation limit realised through its closed system of
//! polynomial moments, and the statistics comparing it with particle data.
//!
//! Writing `s_k = ⟨S_t, x^k⟩`, `M_j = ⟨μ_t, x^j⟩`, `μ̄ = M₁` and
//! `c = b̄ + q + φ^∞_t`, the limit satisfies for `k ≥ 1`
//!
//! ```text
//! ds_k = c[k μ̄ s_{k−1} − k s_k + k M_{k−1} s₁] dt
//!      + ½(σ² + σ₀²) k(k−1) s_{k−2} dt + σ₀ k s_{k−1} dW + dξ_k,
//! d⟨ξ_j, ξ_k⟩ = σ² j k M_{j+k−2} dt,
//! ```
//!
//! with `s₀ ≡ 0` and `s(0)` centred Gaussian with covariance
//! `Cov_{μ₀}(x^j, x^k)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fluctuation_field::{FluctuationSample, TestFunction};
use crate::model_lq::{drift_rate_mkv, InitialLaw, MeanFieldFlow, ModelParams};
use crate::numeric::{cholesky_psd, lower_mul};
use crate::stats::{covariance_matrix, estimate, ks_two_sample};
use crate::stochastic_kernel::{NormalStream, SeedRecord, StreamDomain, TimeGrid};

/// Highest monomial degree the moment system carries.
pub const MAX_SYSTEM_DEGREE: usize = 6;

/// Sign of the interaction bracket `c[k μ̄ s_{k−1} − k s_k + k M_{k−1} s₁]`.
///
/// `Derived` is the mean-reverting drift; `Flipped` negates the bracket and
/// exists as a negative control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftSign {
    Derived,
    Flipped,
}

/// State of the moment system at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSystemState {
    /// Highest degree `K`.
    pub k_max: usize,
    /// `s₀ … s_K`.
    pub s: Vec<f64>,
    pub t: f64,
    /// `M₀ … M_{2K−2}` of `μ_t` (at least up to degree `K`).
    pub mu_moments: Vec<f64>,
}

impl MomentSystemState {
    pub fn new(k_max: usize, s: Vec<f64>, t: f64, mu_moments: Vec<f64>) -> Result<Self> {
        check_degree(k_max)?;
        if s.len() != k_max + 1 || mu_moments.len() < moments_needed(k_max) {
            return Err(Error::Construction(format!(
                "state of degree {k_max} needs {} entries and {} law moments",
                k_max + 1,
                moments_needed(k_max)
            )));
        }
        Ok(MomentSystemState {
            k_max,
            s,
            t,
            mu_moments,
        })
    }

    /// Replace the law moments with those of `μ_t` for the given `W_t`.
    pub fn refresh_moments(&mut self, flow: &MeanFieldFlow, w_t: f64) -> Result<()> {
        self.mu_moments = flow.law_at(self.t, w_t)?.moments(moments_needed(self.k_max));
        Ok(())
    }
}

fn moments_needed(k_max: usize) -> usize {
    (2 * k_max).saturating_sub(2).max(k_max)
}

fn check_degree(k: usize) -> Result<()> {
    if k == 0 || k > MAX_SYSTEM_DEGREE {
        return Err(Error::Domain(format!("moment system degree {k} outside 1..=6")));
    }
    Ok(())
}

/// One Euler step of the moment system. `dxi[k]` is the ξ increment of
/// degree `k` (entry 0 is ignored). The returned state carries the old law
/// moments; call [`MomentSystemState::refresh_moments`] before the next step.
pub fn limit_moment_step(
    state: &MomentSystemState,
    dw: f64,
    dxi: &[f64],
    dt: f64,
    p: &ModelParams,
    sign: DriftSign,
) -> Result<MomentSystemState> {
    let kk = state.k_max;
    if dxi.len() != kk + 1 {
        return Err(Error::Construction(format!("need {} ξ increments, got {}", kk + 1, dxi.len())));
    }
    let c = drift_rate_mkv(state.t.min(p.horizon), p)?;
    let s = &state.s;
    let m = &state.mu_moments;
    let mean = m[1];
    let noise2 = 0.5 * (p.sigma * p.sigma + p.sigma0 * p.sigma0);
    let flip = match sign {
        DriftSign::Derived => 1.0,
        DriftSign::Flipped => -1.0,
    };
    let mut next = vec![0.0; kk + 1];
    for k in 1..=kk {
        let kf = k as f64;
        let bracket = kf * mean * s[k - 1] - kf * s[k] + kf * m[k - 1] * s[1];
        let ito = if k >= 2 { noise2 * kf * (kf - 1.0) * s[k - 2] } else { 0.0 };
        let drift = flip * c * bracket + ito;
        next[k] = s[k] + drift * dt + p.sigma0 * kf * s[k - 1] * dw + dxi[k];
    }
    Ok(MomentSystemState {
        k_max: kk,
        s: next,
        t: state.t + dt,
        mu_moments: state.mu_moments.clone(),
    })
}

/// Covariances of the limit noises over the monomials `x⁰ … x^K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitCovarianceSpec {
    pub k_max: usize,
    /// Row-major `(K+1)²`: `⟨μ₀, x^{j+k}⟩ − ⟨μ₀, x^j⟩⟨μ₀, x^k⟩`.
    pub theta0_cov: Vec<f64>,
    sigma: f64,
}

impl LimitCovarianceSpec {
    pub fn new(mu0: &InitialLaw, sigma: f64, k_max: usize) -> Result<Self> {
        check_degree(k_max)?;
        let m = mu0.as_mixture().moments(2 * k_max);
        let dim = k_max + 1;
        let mut theta0_cov = vec![0.0; dim * dim];
        for j in 0..dim {
            for k in 0..dim {
                theta0_cov[j * dim + k] = m[j + k] - m[j] * m[k];
            }
        }
        Ok(LimitCovarianceSpec {
            k_max,
            theta0_cov,
            sigma,
        })
    }

    /// `σ² j k M_{j+k−2}`; zero when either degree is 0.
    pub fn xi_rate(&self, j: usize, k: usize, mu_moments: &[f64]) -> f64 {
        if j == 0 || k == 0 {
            return 0.0;
        }
        self.sigma * self.sigma * (j * k) as f64 * mu_moments[j + k - 2]
    }

    /// Row-major `(K+1)²` ξ rate matrix.
    pub fn xi_rate_matrix(&self, mu_moments: &[f64]) -> Vec<f64> {
        let dim = self.k_max + 1;
        let mut r = vec![0.0; dim * dim];
        for j in 0..dim {
            for k in 0..dim {
                r[j * dim + k] = self.xi_rate(j, k, mu_moments);
            }
        }
        r
    }

    /// Lower Cholesky factor of the degrees `1..=K` block of a `(K+1)²` matrix.
    fn factor_block(&self, full: &[f64]) -> Result<Vec<f64>> {
        let dim = self.k_max + 1;
        let kk = self.k_max;
        let mut block = vec![0.0; kk * kk];
        for j in 0..kk {
            for k in 0..kk {
                block[j * kk + k] = full[(j + 1) * dim + k + 1];
            }
        }
        if block.iter().all(|&v| v == 0.0) {
            return Ok(block);
        }
        cholesky_psd(&block, kk)
    }
}

/// Monte Carlo sampler of the limit vector `(⟨S_t, x^k⟩)_k`.
#[derive(Debug, Clone)]
pub struct LimitSampler {
    params: ModelParams,
    flow: MeanFieldFlow,
    spec: LimitCovarianceSpec,
    grid: TimeGrid,
    sign: DriftSign,
}

impl LimitSampler {
    pub fn new(p: &ModelParams, k_max: usize, n_steps: usize, sign: DriftSign) -> Result<Self> {
        p.check_domain()?;
        Ok(LimitSampler {
            params: *p,
            flow: MeanFieldFlow::new(p)?,
            spec: LimitCovarianceSpec::new(&p.mu0, p.sigma, k_max)?,
            grid: TimeGrid::new(p.horizon, n_steps)?,
            sign,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn spec(&self) -> &LimitCovarianceSpec {
        &self.spec
    }

    /// One replication: the full state `s₀ … s_K` at each requested grid
    /// index. Streams: `Oracle/0` common noise, `Oracle/1` initial
    /// fluctuation, `Oracle/2` ξ increments.
    pub fn sample_path(&self, seed: SeedRecord, record: &[usize]) -> Result<Vec<Vec<f64>>> {
        let kk = self.spec.k_max;
        let dt = self.grid.dt();
        let sqrt_dt = dt.sqrt();
        let mut common = NormalStream::new(seed, StreamDomain::Oracle, 0);
        let mut initial = NormalStream::new(seed, StreamDomain::Oracle, 1);
        let mut innovations = NormalStream::new(seed, StreamDomain::Oracle, 2);

        let theta_l = self.spec.factor_block(&self.spec.theta0_cov)?;
        let mut z = vec![0.0; kk];
        let mut buf = vec![0.0; kk];
        initial.fill_normal(&mut z);
        lower_mul(&theta_l, &z, &mut buf);
        let mut s = vec![0.0; kk + 1];
        s[1..].copy_from_slice(&buf);

        let mut state = MomentSystemState::new(kk, s, 0.0, vec![0.0; moments_needed(kk) + 1])?;
        let mut w = 0.0;
        state.refresh_moments(&self.flow, w)?;
        let mut out = Vec::with_capacity(record.len());
        let mut next_record = record.iter().peekable();
        let mut dxi = vec![0.0; kk + 1];
        for k in 0..=self.grid.n_steps() {
            while next_record.peek() == Some(&&k) {
                out.push(state.s.clone());
                next_record.next();
            }
            if k == self.grid.n_steps() {
                break;
            }
            let rate = self.spec.xi_rate_matrix(&state.mu_moments);
            let l = self.spec.factor_block(&rate)?;
            innovations.fill_normal(&mut z);
            lower_mul(&l, &z, &mut buf);
            for j in 0..kk {
                dxi[j + 1] = sqrt_dt * buf[j];
            }
            let dw = sqrt_dt * common.next_normal();
            state = limit_moment_step(&state, dw, &dxi, dt, &self.params, self.sign)?;
            w += dw;
            state.t = self.grid.time(k + 1);
            state.refresh_moments(&self.flow, w)?;
        }
        if out.len() != record.len() {
            return Err(Error::Range("record indices must be increasing grid indices".into()));
        }
        Ok(out)
    }
}

/// Samples of `(⟨S_t, x^d⟩)_{d ∈ degrees}` at `times`, one
/// [`FluctuationSample`] per replication, integrated on `n_steps` steps.
pub fn sample_limit_vector(
    degrees: &[usize],
    times: &[f64],
    replications: usize,
    seed: u64,
    p: &ModelParams,
    n_steps: usize,
    sign: DriftSign,
) -> Result<Vec<FluctuationSample>> {
    let k_max = degrees.iter().copied().max().unwrap_or(0).max(1);
    let sampler = LimitSampler::new(p, k_max, n_steps, sign)?;
    let indices = times
        .iter()
        .map(|&t| sampler.grid.index_of(t))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = indices.clone();
    order.sort_unstable();
    order.dedup();
    let labels: Vec<String> = degrees.iter().map(|&d| TestFunction::Monomial(d).label()).collect();
    (0..replications as u64)
        .map(|r| {
            let states = sampler.sample_path(
                SeedRecord {
                    base_seed: seed,
                    replication_id: r,
                },
                &order,
            )?;
            let mut values = Vec::with_capacity(times.len() * degrees.len());
            for idx in &indices {
                let s = &states[order.binary_search(idx).expect("recorded index")];
                values.extend(degrees.iter().map(|&d| s[d]));
            }
            Ok(FluctuationSample {
                times: times.to_vec(),
                labels: labels.clone(),
                values,
                n: 0,
                replication_id: r,
            })
        })
        .collect()
}

/// Column of one `(time, test function)` marginal across replications.
pub fn marginal(samples: &[FluctuationSample], time_index: usize, testfn_index: usize) -> Vec<f64> {
    samples.iter().map(|s| s.value(time_index, testfn_index)).collect()
}

/// Sample covariance across test functions at one time index.
pub fn covariance_at(samples: &[FluctuationSample], time_index: usize) -> Vec<f64> {
    let width = samples[0].labels.len();
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| (0..width).map(|j| s.value(time_index, j)).collect())
        .collect();
    covariance_matrix(&rows)
}

/// Smallest ensemble accepted by [`compare_distributions`].
pub const MIN_COMPARISON_REPLICATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonEntry {
    pub time: f64,
    /// Monomial degree, when the test function is one.
    pub degree: Option<usize>,
    pub testfn: String,
    pub mean_diff: f64,
    pub mean_se: f64,
    /// `‖Ĉ_emp − Ĉ_oracle‖_F / ‖Ĉ_oracle‖_F` over all test functions at this time.
    pub cov_rel_err: f64,
    pub ks_stat: f64,
    pub ks_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub empirical_replications: usize,
    pub oracle_replications: usize,
    pub entries: Vec<ComparisonEntry>,
}

impl ComparisonReport {
    pub fn entry(&self, time: f64, degree: usize) -> Option<&ComparisonEntry> {
        self.entries
            .iter()
            .find(|e| e.degree == Some(degree) && (e.time - time).abs() <= 1e-12 * time.abs().max(1.0))
    }

    pub fn max_cov_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.cov_rel_err).fold(0.0, f64::max)
    }

    pub fn ks_passes(&self, level: f64) -> usize {
        self.entries.iter().filter(|e| e.ks_p > level).count()
    }
}

fn monomial_degree(label: &str) -> Option<usize> {
    label.strip_prefix("x^")?.parse().ok()
}

/// Per-marginal and per-time comparison of two ensembles.
pub fn compare_distributions(
    empirical: &[FluctuationSample],
    oracle: &[FluctuationSample],
) -> Result<ComparisonReport> {
    if empirical.len() < MIN_COMPARISON_REPLICATIONS || oracle.len() < MIN_COMPARISON_REPLICATIONS {
        return Err(Error::Domain(format!(
            "distribution comparison needs >= {MIN_COMPARISON_REPLICATIONS} replications per side, \
             got {} and {}",
            empirical.len(),
            oracle.len()
        )));
    }
    let (e0, o0) = (&empirical[0], &oracle[0]);
    let shape_ok = |a: &FluctuationSample, b: &FluctuationSample| {
        a.labels == b.labels
            && a.times.len() == b.times.len()
            && a.times.iter().zip(&b.times).all(|(x, y)| (x - y).abs() <= 1e-12)
    };
    if !shape_ok(e0, o0) || !empirical.iter().chain(oracle).all(|s| shape_ok(s, e0)) {
        return Err(Error::Construction("ensembles differ in test functions or times".into()));
    }
    let mut entries = Vec::new();
    for (ti, &time) in e0.times.iter().enumerate() {
        let ce = covariance_at(empirical, ti);
        let co = covariance_at(oracle, ti);
        let diff: f64 = ce.iter().zip(&co).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = co.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cov_rel_err = if norm > 0.0 { diff / norm } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
        for (fi, label) in e0.labels.iter().enumerate() {
            let a = marginal(empirical, ti, fi);
            let b = marginal(oracle, ti, fi);
            let (ea, eb) = (estimate(&a), estimate(&b));
            let (ks_stat, ks_p) = ks_two_sample(&a, &b);
            entries.push(ComparisonEntry {
                time,
                degree: monomial_degree(label),
                testfn: label.clone(),
                mean_diff: ea.mean - eb.mean,
                mean_se: (ea.se * ea.se + eb.se * eb.se).sqrt(),
                cov_rel_err,
                ks_stat,
                ks_p,
            });
        }
    }
    Ok(ComparisonReport {
        empirical_replications: empirical.len(),
        oracle_replications: oracle.len(),
        entries,
    })
}
