//! Experiment orchestration: config parsing, replicated runs, rate fits and
//! report emission.
//!
//! Every run is a pure function of its [`ExperimentConfig`]. Replications map
//! to independent counter streams and are reduced in index order, so outputs
//! do not depend on the worker count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clt_oracle::{compare_distributions, sample_limit_vector, ComparisonReport, DriftSign, MIN_COMPARISON_REPLICATIONS};
use crate::empirical::{l4_functional_error, MeasureFunctional, SupGapTracker};
use crate::error::{Error, Result};
use crate::fluctuation_field::{fluctuation_row, FluctuationSample, TestFunction};
use crate::model_lq::{coupling_gap, drift_rate_mkv, InitialLaw, MeanFieldFlow, ModelParams};
use crate::numeric::{inverse_spd, pairwise_sum_by};
use crate::particle_systems::{LqStepper, SystemTag};
use crate::stats::{estimate, variance_estimate, weighted_line_fit, Estimate};
use crate::stochastic_kernel::{make_bundle, TimeGrid};

/// Version tag of every CSV and JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;
pub const MIN_RATE_REPLICATIONS: usize = 50;
/// Grid intervals used for the deterministic Riccati gap.
pub const COUPLING_GAP_GRID: usize = 10_000;
/// Covariance tolerance of the CLT comparison, relative Frobenius.
pub const CLT_COV_TOLERANCE: f64 = 0.1;
pub const CLT_KS_LEVEL: f64 = 0.01;
/// Marginals (out of six) that must clear [`CLT_KS_LEVEL`].
pub const CLT_KS_REQUIRED: usize = 5;
pub const DRIFT_TOLERANCE: f64 = 0.1;
/// Quantile levels that bound the fitted tail.
pub const TAIL_LEVELS: (f64, f64) = (0.75, 0.99);
pub const TAIL_MIN_R_SQUARED: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    LlnRate,
    CouplingRate,
    Clt,
    L4Rate,
    HatRate,
    Concentration,
    /// Regression of the degree-2 moment drift.
    DriftSign,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::LlnRate => "lln_rate",
            ExperimentKind::CouplingRate => "coupling_rate",
            ExperimentKind::Clt => "clt",
            ExperimentKind::L4Rate => "l4_rate",
            ExperimentKind::HatRate => "hat_rate",
            ExperimentKind::Concentration => "concentration",
            ExperimentKind::DriftSign => "drift_sign",
        }
    }

    /// Slope and default tolerance of the rate experiments.
    pub fn expected_rate(self) -> Option<(f64, f64)> {
        match self {
            ExperimentKind::LlnRate => Some((-2.0, 0.3)),
            ExperimentKind::CouplingRate => Some((-1.0, 0.1)),
            ExperimentKind::HatRate => Some((-0.5, 0.15)),
            ExperimentKind::L4Rate => Some((-0.5, 0.1)),
            _ => None,
        }
    }

    fn min_replications(self) -> usize {
        match self {
            ExperimentKind::CouplingRate => 0,
            ExperimentKind::Clt | ExperimentKind::Concentration | ExperimentKind::DriftSign => {
                MIN_COMPARISON_REPLICATIONS
            }
            _ => MIN_RATE_REPLICATIONS,
        }
    }
}

/// Particle system fed to the CLT comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CltSystem {
    #[default]
    Nash,
    Mkv,
}

impl CltSystem {
    fn tag(self) -> SystemTag {
        match self {
            CltSystem::Nash => SystemTag::Nash,
            CltSystem::Mkv => SystemTag::Mkv,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub params: ModelParams,
    pub n_ladder: Vec<usize>,
    pub replications: usize,
    pub dt_steps: usize,
    pub base_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Overrides the default slope tolerance of rate experiments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    /// Oracle ensemble size for `clt`; defaults to `replications`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_replications: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<CltSystem>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.params
            .check_domain()
            .map_err(|e| Error::config("params", e.to_string()))?;
        if self.n_ladder.is_empty() {
            return Err(Error::config("n_ladder", "must not be empty"));
        }
        for (i, w) in self.n_ladder.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::config(
                    format!("n_ladder[{}]", i + 1),
                    format!("ladder must be strictly increasing, {} follows {}", w[1], w[0]),
                ));
            }
        }
        let min_n = if self.experiment == ExperimentKind::CouplingRate { 2 } else { 1 };
        if self.n_ladder[0] < min_n {
            return Err(Error::config("n_ladder[0]", format!("must be at least {min_n}")));
        }
        if self.expected_rate().is_some() && self.n_ladder.len() < 2 {
            return Err(Error::config("n_ladder", "a rate fit needs at least two rungs"));
        }
        let min_m = self.experiment.min_replications();
        if self.replications < min_m {
            return Err(Error::config(
                "replications",
                format!("{} needs at least {min_m}, got {}", self.experiment.name(), self.replications),
            ));
        }
        if self.dt_steps == 0 {
            return Err(Error::config("dt_steps", "must be positive"));
        }
        if self.experiment == ExperimentKind::Clt && !self.dt_steps.is_multiple_of(2) {
            return Err(Error::config("dt_steps", "clt records T/2, so the step count must be even"));
        }
        if let Some(tol) = self.tolerance {
            if !(tol.is_finite() && tol > 0.0) {
                return Err(Error::config("tolerance", "must be a positive number"));
            }
        }
        if let Some(m) = self.oracle_replications {
            if m < MIN_COMPARISON_REPLICATIONS {
                return Err(Error::config(
                    "oracle_replications",
                    format!("needs at least {MIN_COMPARISON_REPLICATIONS}, got {m}"),
                ));
            }
        }
        if self.system.is_some() && self.experiment != ExperimentKind::Clt {
            return Err(Error::config("system", "only clt accepts a system choice"));
        }
        Ok(())
    }

    /// `(expected slope, tolerance)` for rate experiments.
    pub fn expected_rate(&self) -> Option<(f64, f64)> {
        self.experiment
            .expected_rate()
            .map(|(slope, tol)| (slope, self.tolerance.unwrap_or(tol)))
    }

    /// SHA-256 of the canonical JSON, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.params.horizon, self.dt_steps)
    }
}

/// Map replications `0..m` in parallel and collect in index order.
fn replicate<T: Send>(m: usize, f: impl Fn(u64) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..m as u64).into_par_iter().map(f).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderPoint {
    pub n: usize,
    pub statistic: f64,
    pub se: f64,
    /// False when the rung was dropped from the fit.
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub ladder: Vec<LadderPoint>,
    /// Absent when fewer than two rungs survive.
    pub fitted_slope: Option<f64>,
    pub slope_se: Option<f64>,
    pub intercept: Option<f64>,
    pub expected_slope: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Every statistic is exactly zero; there is no rate to fit.
    pub degenerate_zero: bool,
    pub warnings: Vec<String>,
    /// Extra checks attached by some experiments.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<ExactCheck>,
}

/// A Monte Carlo estimate compared with a closed-form value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactCheck {
    pub label: String,
    pub estimate: f64,
    pub se: f64,
    pub expected: f64,
    /// Allowed distance in standard errors.
    pub n_se: f64,
    pub pass: bool,
}

impl ExactCheck {
    fn new(label: String, est: Estimate, expected: f64, n_se: f64) -> Self {
        ExactCheck {
            label,
            estimate: est.mean,
            se: est.se,
            expected,
            n_se,
            pass: (est.mean - expected).abs() <= n_se * est.se,
        }
    }
}

/// Weighted log-log fit of `statistic ≈ C nᵝ`.
///
/// Rungs within two standard errors of zero are dropped with a warning. A
/// ladder of exact zeros is flagged as degenerate and not fitted.
pub fn fit_rate(points: &[(usize, Estimate)], expected_slope: f64, tolerance: f64) -> RateReport {
    let mut warnings = Vec::new();
    let degenerate_zero = points.iter().all(|(_, e)| e.mean == 0.0);
    let ladder: Vec<LadderPoint> = points
        .iter()
        .map(|&(n, e)| {
            let used = !degenerate_zero && e.mean > 0.0 && e.mean > 2.0 * e.se;
            if !degenerate_zero && !used {
                warnings.push(format!(
                    "dropped n={n}: statistic {:.3e} is within 2 SE ({:.3e}) of zero",
                    e.mean, e.se
                ));
            }
            LadderPoint {
                n,
                statistic: e.mean,
                se: e.se,
                used,
            }
        })
        .collect();
    if degenerate_zero {
        warnings.push("every statistic is zero; rate fit skipped".into());
    }
    let kept: Vec<&LadderPoint> = ladder.iter().filter(|p| p.used).collect();
    let fit = if kept.len() >= 2 {
        let x: Vec<f64> = kept.iter().map(|p| (p.n as f64).ln()).collect();
        let y: Vec<f64> = kept.iter().map(|p| p.statistic.ln()).collect();
        let sd: Vec<f64> = kept.iter().map(|p| p.se / p.statistic).collect();
        match weighted_line_fit(&x, &y, &sd) {
            Ok(f) => Some(f),
            Err(e) => {
                warnings.push(format!("rate fit failed: {e}"));
                None
            }
        }
    } else {
        if !degenerate_zero {
            warnings.push(format!("only {} usable rungs; rate fit skipped", kept.len()));
        }
        None
    };
    let pass = fit.is_some_and(|f| (f.slope - expected_slope).abs() <= tolerance);
    RateReport {
        ladder,
        fitted_slope: fit.map(|f| f.slope),
        slope_se: fit.map(|f| f.slope_se),
        intercept: fit.map(|f| f.intercept),
        expected_slope,
        tolerance,
        pass,
        degenerate_zero,
        warnings,
        checks: Vec::new(),
    }
}

fn require(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    if cfg.experiment != kind {
        return Err(Error::config(
            "experiment",
            format!("expected {}, got {}", kind.name(), cfg.experiment.name()),
        ));
    }
    cfg.validate()
}

fn rate_params(cfg: &ExperimentConfig) -> (f64, f64) {
    cfg.expected_rate().expect("rate experiment")
}

/// `E[(1/n) Σ sup_t |Xⁱ − Yⁱ|²]` for the Nash and mean field systems.
pub fn run_lln_rate(cfg: &ExperimentConfig) -> Result<RateReport> {
    require(cfg, ExperimentKind::LlnRate)?;
    let grid = cfg.grid()?;
    let p = cfg.params;
    let mut points = Vec::new();
    for &n in &cfg.n_ladder {
        let stats = replicate(cfg.replications, |r| {
            let bundle = make_bundle(cfg.base_seed, r, grid, n)?;
            let mut nash = LqStepper::new(SystemTag::Nash, &p, &bundle)?;
            let mut mkv = LqStepper::new(SystemTag::Mkv, &p, &bundle)?;
            let mut tracker = SupGapTracker::new(n);
            tracker.update(nash.state(), mkv.state());
            while !nash.is_done() {
                nash.step(&bundle)?;
                mkv.step(&bundle)?;
                tracker.update(nash.state(), mkv.state());
            }
            Ok(tracker.mean_sq_sup())
        })?;
        points.push((n, estimate(&stats)));
    }
    let (slope, tol) = rate_params(cfg);
    Ok(fit_rate(&points, slope, tol))
}

/// Deterministic Riccati gap `sup_t |(1 − 1/n)φⁿ − φ^∞|`.
pub fn run_coupling_rate(cfg: &ExperimentConfig) -> Result<RateReport> {
    require(cfg, ExperimentKind::CouplingRate)?;
    let points = cfg
        .n_ladder
        .iter()
        .map(|&n| {
            Ok((
                n,
                Estimate {
                    mean: coupling_gap(n, &cfg.params, COUPLING_GAP_GRID)?,
                    se: 0.0,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (slope, tol) = rate_params(cfg);
    Ok(fit_rate(&points, slope, tol))
}

/// `E[sup_t |Y¹ − X̂¹|⁴]^{1/4}` between the mean field and hat systems.
pub fn run_hat_rate(cfg: &ExperimentConfig) -> Result<RateReport> {
    require(cfg, ExperimentKind::HatRate)?;
    let grid = cfg.grid()?;
    let p = cfg.params;
    let mut points = Vec::new();
    for &n in &cfg.n_ladder {
        let fourth = replicate(cfg.replications, |r| {
            let bundle = make_bundle(cfg.base_seed, r, grid, n)?;
            let mut mkv = LqStepper::new(SystemTag::Mkv, &p, &bundle)?;
            let mut hat = LqStepper::new(SystemTag::Hat, &p, &bundle)?;
            let mut sup = (mkv.state()[0] - hat.state()[0]).abs();
            while !mkv.is_done() {
                mkv.step(&bundle)?;
                hat.step(&bundle)?;
                sup = sup.max((mkv.state()[0] - hat.state()[0]).abs());
            }
            Ok(sup.powi(4))
        })?;
        points.push((n, fourth_root(estimate(&fourth))));
    }
    let (slope, tol) = rate_params(cfg);
    Ok(fit_rate(&points, slope, tol))
}

/// `(E Z)^{1/4}` with a delta-method standard error.
fn fourth_root(e: Estimate) -> Estimate {
    let v = e.mean.max(0.0).powf(0.25);
    Estimate {
        mean: v,
        se: if v > 0.0 { e.se / (4.0 * v.powi(3)) } else { 0.0 },
    }
}

/// `E[|tanh⟨mⁿ, x⟩ − tanh⟨μ₀, x⟩|⁴]^{1/4}`; for Gaussian `μ₀` also checks
/// `E[|m̄ⁿ − μ̄₀|⁴]^{1/4} = (3v²/n²)^{1/4}` at every rung.
pub fn run_l4_rate(cfg: &ExperimentConfig) -> Result<RateReport> {
    require(cfg, ExperimentKind::L4Rate)?;
    let mu0 = cfg.params.mu0;
    let f = MeasureFunctional::tanh_of_mean();
    let points = cfg
        .n_ladder
        .par_iter()
        .map(|&n| Ok((n, l4_functional_error(&f, &mu0, n, cfg.replications, cfg.base_seed)?)))
        .collect::<Result<Vec<_>>>()?;
    let (slope, tol) = rate_params(cfg);
    let mut report = fit_rate(&points, slope, tol);
    if let InitialLaw::Gaussian { var, .. } = mu0 {
        let mean_fn = MeasureFunctional::mean();
        for &n in &cfg.n_ladder {
            let est = l4_functional_error(&mean_fn, &mu0, n, cfg.replications, cfg.base_seed)?;
            let expected = (3.0 * var * var / (n as f64 * n as f64)).powf(0.25);
            report
                .checks
                .push(ExactCheck::new(format!("mean l4 at n={n}"), est, expected, 3.0));
        }
        report.pass &= report.checks.iter().all(|c| c.pass);
    }
    Ok(report)
}

/// Fluctuation samples of one system, recorded at grid times `times`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_fluctuations(
    p: &ModelParams,
    system: SystemTag,
    n: usize,
    replications: usize,
    dt_steps: usize,
    base_seed: u64,
    testfns: &[TestFunction],
    times: &[f64],
) -> Result<Vec<FluctuationSample>> {
    let grid = TimeGrid::new(p.horizon, dt_steps)?;
    let indices = times.iter().map(|&t| grid.index_of(t)).collect::<Result<Vec<_>>>()?;
    let flow = MeanFieldFlow::new(p)?;
    let labels: Vec<String> = testfns.iter().map(TestFunction::label).collect();
    replicate(replications, |r| {
        let bundle = make_bundle(base_seed, r, grid, n)?;
        let mut stepper = LqStepper::new(system, p, &bundle)?;
        let mut values = vec![0.0; times.len() * testfns.len()];
        let mut w = 0.0;
        loop {
            let k = stepper.step_index();
            for (ti, _) in indices.iter().enumerate().filter(|(_, &idx)| idx == k) {
                let law = flow.law_at(grid.time(k), w)?;
                let row = fluctuation_row(stepper.state(), &law, testfns)?;
                values[ti * testfns.len()..(ti + 1) * testfns.len()].copy_from_slice(&row);
            }
            if stepper.is_done() {
                break;
            }
            w += bundle.common()[k];
            stepper.step(&bundle)?;
        }
        Ok(FluctuationSample {
            times: times.to_vec(),
            labels: labels.clone(),
            values,
            n,
            replication_id: r,
        })
    })
}

/// The finite-`n` identities `⟨Sⁿ_t, 1⟩ = 0` and
/// `Var(⟨Sⁿ_t, x⟩) = Var(X₀) + σ²t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    pub max_abs_constant: f64,
    pub constant_tolerance: f64,
    pub variance_checks: Vec<ExactCheck>,
    pub pass: bool,
}

pub const CONSTANT_TOLERANCE: f64 = 1e-12;

/// Checks the identities on samples whose first two columns are `x^0, x^1`.
pub fn identity_report(samples: &[FluctuationSample], p: &ModelParams) -> Result<IdentityReport> {
    let first = samples.first().ok_or_else(|| Error::Domain("no samples".into()))?;
    if first.labels.len() < 2 || first.labels[0] != "x^0" || first.labels[1] != "x^1" {
        return Err(Error::Construction("identity check needs x^0 and x^1 columns".into()));
    }
    let max_abs_constant = samples
        .iter()
        .flat_map(|s| (0..s.times.len()).map(move |ti| s.value(ti, 0).abs()))
        .fold(0.0, f64::max);
    let variance_checks: Vec<ExactCheck> = first
        .times
        .iter()
        .enumerate()
        .map(|(ti, &t)| {
            let col: Vec<f64> = samples.iter().map(|s| s.value(ti, 1)).collect();
            ExactCheck::new(
                format!("Var S(Id) at t={t}"),
                variance_estimate(&col),
                p.mu0.var() + p.sigma * p.sigma * t,
                3.0,
            )
        })
        .collect();
    let pass = max_abs_constant <= CONSTANT_TOLERANCE && variance_checks.iter().all(|c| c.pass);
    Ok(IdentityReport {
        max_abs_constant,
        constant_tolerance: CONSTANT_TOLERANCE,
        variance_checks,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CltReport {
    pub n: usize,
    pub system: CltSystem,
    pub times: Vec<f64>,
    pub comparison: ComparisonReport,
    /// Same comparison against an oracle with the opposite drift sign.
    pub control: ComparisonReport,
    pub identities: IdentityReport,
    pub cov_tolerance: f64,
    pub ks_level: f64,
    pub ks_required: usize,
    pub cov_pass: bool,
    pub ks_pass: bool,
    /// The flipped-sign oracle is rejected at degree 2.
    pub control_rejected: bool,
    pub pass: bool,
}

fn strip_constant(samples: &[FluctuationSample]) -> Vec<FluctuationSample> {
    samples
        .iter()
        .map(|s| {
            let width = s.labels.len();
            FluctuationSample {
                times: s.times.clone(),
                labels: s.labels[1..].to_vec(),
                values: s
                    .values
                    .chunks(width)
                    .flat_map(|row| row[1..].iter().copied())
                    .collect(),
                n: s.n,
                replication_id: s.replication_id,
            }
        })
        .collect()
}

/// Fluctuation ensemble at the largest `n` of the ladder against the
/// moment-system oracle, with a flipped-sign negative control.
///
/// Returns the report and the empirical samples (including the `x^0` column).
pub fn run_clt(cfg: &ExperimentConfig) -> Result<(CltReport, Vec<FluctuationSample>)> {
    require(cfg, ExperimentKind::Clt)?;
    let p = cfg.params;
    let n = *cfg.n_ladder.last().expect("validated ladder");
    let system = cfg.system.unwrap_or_default();
    let times = [p.horizon / 2.0, p.horizon];
    let testfns: Vec<TestFunction> = (0..=3).map(TestFunction::Monomial).collect();
    let samples = simulate_fluctuations(
        &p,
        system.tag(),
        n,
        cfg.replications,
        cfg.dt_steps,
        cfg.base_seed,
        &testfns,
        &times,
    )?;
    let identities = identity_report(&samples, &p)?;
    let empirical = strip_constant(&samples);
    let oracle_m = cfg.oracle_replications.unwrap_or(cfg.replications);
    let oracle = |sign| sample_limit_vector(&[1, 2, 3], &times, oracle_m, cfg.base_seed, &p, cfg.dt_steps, sign);
    let comparison = compare_distributions(&empirical, &oracle(DriftSign::Derived)?)?;
    let control = compare_distributions(&empirical, &oracle(DriftSign::Flipped)?)?;

    let cov_pass = comparison.entries.iter().all(|e| e.cov_rel_err <= CLT_COV_TOLERANCE);
    let ks_pass = comparison.ks_passes(CLT_KS_LEVEL) >= CLT_KS_REQUIRED;
    let control_rejected = control
        .entries
        .iter()
        .filter(|e| e.degree == Some(2))
        .any(|e| e.ks_p <= CLT_KS_LEVEL || e.cov_rel_err > CLT_COV_TOLERANCE);
    let pass = cov_pass && ks_pass && control_rejected && identities.pass;
    Ok((
        CltReport {
            n,
            system,
            times: times.to_vec(),
            comparison,
            control,
            identities,
            cov_tolerance: CLT_COV_TOLERANCE,
            ks_level: CLT_KS_LEVEL,
            ks_required: CLT_KS_REQUIRED,
            cov_pass,
            ks_pass,
            control_rejected,
            pass,
        },
        samples,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailPoint {
    pub a: f64,
    pub survival: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub n: usize,
    /// Per-replication path distance `(1/n) Σ sup_t |Xⁱ − Yⁱ|`.
    #[serde(skip)]
    pub distances: Vec<f64>,
    pub tail: Vec<TailPoint>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub monotone: bool,
    pub pass: bool,
}

/// Empirical tail `P(D > a)` of the Nash/mean field path distance `D`
/// against `a²`, fitted on the upper quartile.
///
/// `D` bounds the path-space `W₁` of the two empirical measures through
/// the identity coupling.
pub fn run_concentration(cfg: &ExperimentConfig) -> Result<ConcentrationReport> {
    require(cfg, ExperimentKind::Concentration)?;
    let grid = cfg.grid()?;
    let p = cfg.params;
    let n = cfg.n_ladder[0];
    let distances = replicate(cfg.replications, |r| {
        let bundle = make_bundle(cfg.base_seed, r, grid, n)?;
        let mut nash = LqStepper::new(SystemTag::Nash, &p, &bundle)?;
        let mut mkv = LqStepper::new(SystemTag::Mkv, &p, &bundle)?;
        let mut tracker = SupGapTracker::new(n);
        tracker.update(nash.state(), mkv.state());
        while !nash.is_done() {
            nash.step(&bundle)?;
            mkv.step(&bundle)?;
            tracker.update(nash.state(), mkv.state());
        }
        Ok(tracker.mean_sup())
    })?;
    let tail = tail_points(&distances);
    let x: Vec<f64> = tail.iter().map(|t| t.a * t.a).collect();
    let y: Vec<f64> = tail.iter().map(|t| t.survival.ln()).collect();
    let fit = weighted_line_fit(&x, &y, &vec![0.0; x.len()])?;
    let monotone = tail.windows(2).all(|w| w[1].a >= w[0].a && w[1].survival <= w[0].survival);
    let pass = monotone && fit.slope < 0.0 && fit.r_squared >= TAIL_MIN_R_SQUARED;
    Ok(ConcentrationReport {
        n,
        distances,
        tail,
        slope: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        monotone,
        pass,
    })
}

/// Survival at the empirical quantiles `0.75, 0.76, …, 0.99`, skipping
/// repeated thresholds.
pub fn tail_points(values: &[f64]) -> Vec<TailPoint> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let (lo, hi) = TAIL_LEVELS;
    let steps = ((hi - lo) * 100.0).round() as usize;
    let mut out: Vec<TailPoint> = Vec::new();
    for j in 0..=steps {
        let level = lo + j as f64 / 100.0;
        let a = sorted[((level * m as f64) as usize).min(m - 1)];
        if out.last().is_some_and(|t| t.a == a) {
            continue;
        }
        let above = m - sorted.partition_point(|&v| v <= a);
        if above == 0 {
            break;
        }
        out.push(TailPoint {
            a,
            survival: above as f64 / m as f64,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftRegressionReport {
    pub n: usize,
    pub replications: usize,
    pub dt_steps: usize,
    /// Coefficients on `c μ̄ s₁`, `c s₂` and `s₁ ΔW/Δt`.
    pub coefficients: [f64; 3],
    pub standard_errors: [f64; 3],
    pub expected: [f64; 3],
    /// Coefficients of the sign-flipped drift.
    pub flipped: [f64; 2],
    pub relative_errors: [f64; 2],
    pub tolerance: f64,
    /// The flipped coefficients fall outside the tolerance.
    pub flipped_rejected: bool,
    pub pass: bool,
}

/// Per-time sufficient statistics of the drift regression.
#[derive(Debug, Clone, Default)]
struct MomentSums {
    count: f64,
    x: [f64; 3],
    y: f64,
    yy: f64,
    xx: [[f64; 3]; 3],
    xy: [f64; 3],
}

impl MomentSums {
    fn add(&mut self, x: [f64; 3], y: f64) {
        self.count += 1.0;
        self.y += y;
        self.yy += y * y;
        for a in 0..3 {
            self.x[a] += x[a];
            self.xy[a] += x[a] * y;
            for b in 0..3 {
                self.xx[a][b] += x[a] * x[b];
            }
        }
    }

    fn merge(&mut self, o: &MomentSums) {
        self.count += o.count;
        self.y += o.y;
        self.yy += o.yy;
        for a in 0..3 {
            self.x[a] += o.x[a];
            self.xy[a] += o.xy[a];
            for b in 0..3 {
                self.xx[a][b] += o.xx[a][b];
            }
        }
    }
}

/// Replications grouped per sequential accumulation chunk.
const REGRESSION_CHUNK: usize = 64;

/// Regress `Δs₂/Δt` on `(c μ̄ s₁, c s₂, s₁ ΔW/Δt)` with one intercept per
/// time step, pooling all steps and replications of the Nash system.
///
/// Here `s_k = √n(⟨mⁿ, x^k⟩ − ⟨μ_t, x^k⟩)`. The limit drift predicts
/// `(4, −2, 2σ₀)`; the flipped sign predicts `(−4, 2)` for the first two.
/// The time intercepts absorb the deterministic Euler offset of the law.
pub fn run_drift_regression(cfg: &ExperimentConfig) -> Result<DriftRegressionReport> {
    require(cfg, ExperimentKind::DriftSign)?;
    let grid = cfg.grid()?;
    let p = cfg.params;
    let n = *cfg.n_ladder.last().expect("validated ladder");
    let steps = cfg.dt_steps;
    let dt = grid.dt();
    let flow = MeanFieldFlow::new(&p)?;
    let rates = (0..steps).map(|k| drift_rate_mkv(grid.time(k), &p)).collect::<Result<Vec<_>>>()?;
    let sqrt_n = (n as f64).sqrt();
    let nf = n as f64;

    let moments = |state: &[f64], t: f64, w: f64| -> Result<(f64, f64, f64)> {
        let law = flow.law_at(t, w)?;
        let m1 = pairwise_sum_by(state, &|x| x) / nf;
        let m2 = pairwise_sum_by(state, &|x| x * x) / nf;
        Ok((sqrt_n * (m1 - law.moment(1)), sqrt_n * (m2 - law.moment(2)), law.mean()))
    };

    let chunks: Vec<u64> = (0..cfg.replications.div_ceil(REGRESSION_CHUNK) as u64).collect();
    let partial = chunks
        .par_iter()
        .map(|&chunk| {
            let mut sums = vec![MomentSums::default(); steps];
            let start = chunk * REGRESSION_CHUNK as u64;
            let end = (start + REGRESSION_CHUNK as u64).min(cfg.replications as u64);
            for r in start..end {
                let bundle = make_bundle(cfg.base_seed, r, grid, n)?;
                let mut stepper = LqStepper::new(SystemTag::Nash, &p, &bundle)?;
                let mut w = 0.0;
                let (mut s1, mut s2, mut mbar) = moments(stepper.state(), 0.0, w)?;
                for (k, slot) in sums.iter_mut().enumerate() {
                    let dw = bundle.common()[k];
                    stepper.step(&bundle)?;
                    w += dw;
                    let next = moments(stepper.state(), grid.time(k + 1), w)?;
                    let c = rates[k];
                    slot.add([c * mbar * s1, c * s2, s1 * dw / dt], (next.1 - s2) / dt);
                    (s1, s2, mbar) = next;
                }
            }
            Ok(sums)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_step = vec![MomentSums::default(); steps];
    for sums in &partial {
        for (acc, s) in per_step.iter_mut().zip(sums) {
            acc.merge(s);
        }
    }

    // Within-time normal equations.
    let mut a = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    let mut yy = 0.0;
    let mut obs = 0.0;
    for s in &per_step {
        for i in 0..3 {
            b[i] += s.xy[i] - s.x[i] * s.y / s.count;
            for j in 0..3 {
                a[i][j] += s.xx[i][j] - s.x[i] * s.x[j] / s.count;
            }
        }
        yy += s.yy - s.y * s.y / s.count;
        obs += s.count;
    }
    let flat: Vec<f64> = a.iter().flatten().copied().collect();
    let inv = inverse_spd(&flat, 3)?;
    let mut beta = [0.0; 3];
    for i in 0..3 {
        beta[i] = (0..3).map(|j| inv[i * 3 + j] * b[j]).sum();
    }
    let resid = (yy - (0..3).map(|i| beta[i] * b[i]).sum::<f64>()).max(0.0);
    let dof = obs - steps as f64 - 3.0;
    let sigma2 = resid / dof.max(1.0);
    let mut se = [0.0; 3];
    for i in 0..3 {
        se[i] = (sigma2 * inv[i * 3 + i]).sqrt();
    }

    let expected = [4.0, -2.0, 2.0 * p.sigma0];
    let flipped = [-4.0, 2.0];
    let relative_errors = [
        (beta[0] - expected[0]).abs() / expected[0].abs(),
        (beta[1] - expected[1]).abs() / expected[1].abs(),
    ];
    let flipped_rejected = (0..2).any(|i| (beta[i] - flipped[i]).abs() > DRIFT_TOLERANCE * flipped[i].abs());
    let pass = relative_errors.iter().all(|e| *e <= DRIFT_TOLERANCE) && flipped_rejected;
    Ok(DriftRegressionReport {
        n,
        replications: cfg.replications,
        dt_steps: steps,
        coefficients: beta,
        standard_errors: se,
        expected,
        flipped,
        relative_errors,
        tolerance: DRIFT_TOLERANCE,
        flipped_rejected,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Report {
    Rate(RateReport),
    Clt(Box<CltReport>),
    Concentration(ConcentrationReport),
    DriftSign(DriftRegressionReport),
}

impl Report {
    pub fn pass(&self) -> bool {
        match self {
            Report::Rate(r) => r.pass,
            Report::Clt(r) => r.pass,
            Report::Concentration(r) => r.pass,
            Report::DriftSign(r) => r.pass,
        }
    }
}

/// A finished run: report plus rendered CSV tables.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub report: Report,
    pub csv: String,
    /// Per-replication fluctuation values, for `clt` only.
    pub samples_csv: Option<String>,
}

impl ExperimentOutcome {
    pub fn pass(&self) -> bool {
        self.report.pass()
    }

    /// File stem `<experiment>_<first 16 hex digits of the config hash>`.
    pub fn stem(&self) -> String {
        format!("{}_{}", self.config.experiment.name(), &self.config.hash()[..16])
    }

    /// JSON envelope with schema, seed, config hash and code version. The
    /// embedded config omits `output_dir`, so the report does not depend on
    /// where it is written.
    pub fn report_json(&self) -> serde_json::Value {
        let mut config = serde_json::to_value(&self.config).expect("config serialises");
        config.as_object_mut().expect("config object").remove("output_dir");
        serde_json::json!({
            "schema": SCHEMA_VERSION,
            "experiment": self.config.experiment.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "base_seed": self.config.base_seed,
            "config_hash": self.config.hash(),
            "config": config,
            "pass": self.pass(),
            "report": self.report,
        })
    }

    /// Write `<stem>.csv`, `<stem>.json` and, for `clt`, `<stem>_samples.csv`
    /// into `dir`. Returns the paths written.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let stem = self.stem();
        let mut written = Vec::new();
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, &self.csv)?;
        written.push(csv_path);
        let json_path = dir.join(format!("{stem}.json"));
        let mut text = serde_json::to_string_pretty(&self.report_json())?;
        text.push('\n');
        std::fs::write(&json_path, text)?;
        written.push(json_path);
        if let Some(samples) = &self.samples_csv {
            let path = dir.join(format!("{stem}_samples.csv"));
            std::fs::write(&path, samples)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn rate_csv(r: &RateReport) -> String {
    let mut out = String::from("schema,n,statistic,se,used\n");
    for p in &r.ladder {
        writeln!(out, "{SCHEMA_VERSION},{},{:.17e},{:.17e},{}", p.n, p.statistic, p.se, p.used).unwrap();
    }
    out
}

fn clt_csv(r: &CltReport) -> String {
    let mut out = String::from("schema,oracle,time,testfn,mean_diff,mean_se,cov_rel_err,ks_stat,ks_p\n");
    for (name, rep) in [("derived", &r.comparison), ("flipped", &r.control)] {
        for e in &rep.entries {
            writeln!(
                out,
                "{SCHEMA_VERSION},{name},{:.17e},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                e.time, e.testfn, e.mean_diff, e.mean_se, e.cov_rel_err, e.ks_stat, e.ks_p
            )
            .unwrap();
        }
    }
    out
}

fn samples_csv(samples: &[FluctuationSample]) -> String {
    let mut out = String::from("schema,replication,time,testfn_label,value\n");
    for s in samples {
        for (i, t) in s.times.iter().enumerate() {
            for (j, label) in s.labels.iter().enumerate() {
                writeln!(out, "{SCHEMA_VERSION},{},{t:.17e},{label},{:.17e}", s.replication_id, s.value(i, j)).unwrap();
            }
        }
    }
    out
}

fn concentration_csv(r: &ConcentrationReport) -> String {
    let mut out = String::from("schema,a,a_squared,survival,log_survival\n");
    for t in &r.tail {
        writeln!(
            out,
            "{SCHEMA_VERSION},{:.17e},{:.17e},{:.17e},{:.17e}",
            t.a,
            t.a * t.a,
            t.survival,
            t.survival.ln()
        )
        .unwrap();
    }
    out
}

fn drift_csv(r: &DriftRegressionReport) -> String {
    let mut out = String::from("schema,regressor,coefficient,se,expected\n");
    for (i, name) in ["c_mbar_s1", "c_s2", "s1_dw"].iter().enumerate() {
        writeln!(
            out,
            "{SCHEMA_VERSION},{name},{:.17e},{:.17e},{:.17e}",
            r.coefficients[i], r.standard_errors[i], r.expected[i]
        )
        .unwrap();
    }
    out
}

/// Run the experiment named by `cfg.experiment`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let (report, csv, samples) = match cfg.experiment {
        ExperimentKind::LlnRate | ExperimentKind::CouplingRate | ExperimentKind::HatRate | ExperimentKind::L4Rate => {
            let r = match cfg.experiment {
                ExperimentKind::LlnRate => run_lln_rate(cfg)?,
                ExperimentKind::CouplingRate => run_coupling_rate(cfg)?,
                ExperimentKind::HatRate => run_hat_rate(cfg)?,
                _ => run_l4_rate(cfg)?,
            };
            let csv = rate_csv(&r);
            (Report::Rate(r), csv, None)
        }
        ExperimentKind::Clt => {
            let (r, s) = run_clt(cfg)?;
            let csv = clt_csv(&r);
            (Report::Clt(Box::new(r)), csv, Some(samples_csv(&s)))
        }
        ExperimentKind::Concentration => {
            let r = run_concentration(cfg)?;
            let csv = concentration_csv(&r);
            (Report::Concentration(r), csv, None)
        }
        ExperimentKind::DriftSign => {
            let r = run_drift_regression(cfg)?;
            let csv = drift_csv(&r);
            (Report::DriftSign(r), csv, None)
        }
    };
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        report,
        csv,
        samples_csv: samples,
    })
}

/// Run on a dedicated pool of `threads` workers (`None` uses the global pool).
pub fn run_with_threads(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<ExperimentOutcome> {
    match threads {
        None => run_experiment(cfg),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build()
            .map_err(|e| Error::Construction(format!("thread pool: {e}")))?
            .install(|| run_experiment(cfg)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(kind: &str, ladder: &[usize], m: usize) -> ExperimentConfig {
        let text = format!(
            r#"{{"experiment": "{kind}", "params": {}, "n_ladder": {:?}, "replications": {m},
                "dt_steps": 50, "base_seed": 11}}"#,
            serde_json::to_string(&ModelParams::baseline()).unwrap(),
            ladder
        );
        ExperimentConfig::from_json(&text).unwrap()
    }

    fn config_error_path(text: &str) -> String {
        match ExperimentConfig::from_json(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn config_errors_name_the_field() {
        let params = serde_json::to_string(&ModelParams::baseline()).unwrap();
        let base = |ladder: &str, m: usize, extra: &str| {
            format!(
                r#"{{"experiment": "lln_rate", "params": {params}, "n_ladder": {ladder},
                    "replications": {m}, "dt_steps": 10, "base_seed": 1{extra}}}"#
            )
        };
        assert_eq!(config_error_path(&base("[10, 10]", 60, "")), "n_ladder[1]");
        assert_eq!(config_error_path(&base("[10, 20]", 10, "")), "replications");
        assert_eq!(config_error_path(&base("[10, 20]", 60, r#", "colour": 1"#)), "colour");
        assert_eq!(config_error_path(&base(r#"[10, "x"]"#, 60, "")), "n_ladder[1]");
        let bad_sigma = base("[10, 20]", 60, "").replace(r#""sigma":0.5"#, r#""sigma":"loud""#);
        assert_eq!(config_error_path(&bad_sigma), "params.sigma");
        let clt = base("[10, 20]", 60, "").replace("lln_rate", "clt");
        assert_eq!(config_error_path(&clt), "replications");
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seed() {
        let a = config("lln_rate", &[10, 20], 50);
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.base_seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn fit_rate_recovers_power_law_and_drops_noise_rungs() {
        let points: Vec<(usize, Estimate)> = [10usize, 20, 40, 80]
            .iter()
            .map(|&n| {
                (n, Estimate { mean: 3.0 / (n as f64).powi(2), se: 0.01 / (n as f64).powi(2) })
            })
            .chain(std::iter::once((160, Estimate { mean: 1e-6, se: 1e-5 })))
            .collect();
        let r = fit_rate(&points, -2.0, 0.3);
        assert!((r.fitted_slope.unwrap() + 2.0).abs() < 1e-12);
        assert!(r.pass);
        assert!(!r.ladder[4].used);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn fit_rate_flags_all_zero_ladders() {
        let zero = Estimate { mean: 0.0, se: 0.0 };
        let r = fit_rate(&[(10, zero), (20, zero)], -2.0, 0.3);
        assert!(r.degenerate_zero);
        assert!(r.fitted_slope.is_none());
        assert!(!r.pass);
    }

    #[test]
    fn lln_rate_is_zero_without_noise_from_a_point_mass() {
        let mut cfg = config("lln_rate", &[10, 20], 50);
        cfg.params.sigma = 0.0;
        cfg.params.sigma0 = 0.0;
        cfg.params.mu0 = InitialLaw::point_mass(0.7);
        let r = run_lln_rate(&cfg).unwrap();
        assert!(r.degenerate_zero);
        assert!(r.ladder.iter().all(|p| p.statistic == 0.0));
    }

    #[test]
    fn hat_rate_vanishes_only_without_any_noise() {
        let mut cfg = config("hat_rate", &[10, 20], 50);
        cfg.params.sigma0 = 0.0;
        cfg.params.mu0 = InitialLaw::point_mass(0.0);
        cfg.params.eps = cfg.params.q * cfg.params.q;
        cfg.params.g_bar = 0.0;
        let r = run_hat_rate(&cfg).unwrap();
        assert!(r.ladder.iter().all(|p| p.statistic > 0.0));
        // Idiosyncratic noise still moves the empirical mean away from μ̄.
        cfg.params.sigma = 0.0;
        let r = run_hat_rate(&cfg).unwrap();
        assert!(r.degenerate_zero);
    }

    #[test]
    fn coupling_rate_slope_is_minus_one() {
        let r = run_coupling_rate(&config("coupling_rate", &[10, 100, 1000, 10000], 0)).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn mismatched_runner_is_a_config_error() {
        let cfg = config("lln_rate", &[10, 20], 50);
        assert!(matches!(run_hat_rate(&cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn tail_points_are_monotone_and_skip_ties() {
        let values: Vec<f64> = (0..1000).map(|i| (i / 4) as f64).collect();
        let tail = tail_points(&values);
        assert!(tail.windows(2).all(|w| w[1].a > w[0].a && w[1].survival < w[0].survival));
        assert!((tail[0].survival - 0.25).abs() < 0.01);
    }

    #[test]
    fn outputs_are_identical_across_thread_counts() {
        let cfg = config("lln_rate", &[8, 16], 50);
        let a = run_with_threads(&cfg, Some(1)).unwrap();
        let b = run_with_threads(&cfg, Some(3)).unwrap();
        assert_eq!(a.csv, b.csv);
        assert_eq!(a.report_json(), b.report_json());
        assert_eq!(a.report_json()["schema"], 1);
    }

    #[test]
    fn drift_regression_runs_on_a_small_design() {
        let mut cfg = config("drift_sign", &[200], 200);
        cfg.dt_steps = 20;
        let r = run_drift_regression(&cfg).unwrap();
        assert!(r.coefficients.iter().all(|c| c.is_finite()));
        assert!(r.standard_errors.iter().all(|s| s.is_finite() && *s > 0.0));
        // The s₂ coefficient is well identified even at this size.
        assert!((r.coefficients[1] + 2.0).abs() < 6.0 * r.standard_errors[1] + 0.2, "{r:?}");
    }
}
