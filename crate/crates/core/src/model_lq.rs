//! Closed-form solution of the linear-quadratic systemic-risk game.
//!
//! Players control `dXⁱ = (b̄(m̄ − Xⁱ) + αⁱ)dt + σdBⁱ + σ₀dW` with running cost
//! `½α² − qα(m̄ − x) + ½ε(m̄ − x)²` and terminal cost `½ḡ(m̄ − x)²`. The
//! closed-loop Nash equilibrium and the mean field limit are driven by the
//! Riccati curves `φⁿ` and `φ^∞`, which have explicit solutions; everything
//! downstream (drift rates, the master field, the conditional law `μ_t`) is
//! built from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{binomial, exprel, gaussian_raw_moments, GaussHermite};

/// Law of the initial state `X₀`, parameterised by its mean and variance.
///
/// `TwoPoint` puts mass ½ on `mean ± sqrt(var)`. A `Gaussian` with zero
/// variance is a point mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    Gaussian { mean: f64, var: f64 },
    TwoPoint { mean: f64, var: f64 },
}

impl InitialLaw {
    pub fn standard_gaussian() -> Self {
        InitialLaw::Gaussian { mean: 0.0, var: 1.0 }
    }

    pub fn point_mass(at: f64) -> Self {
        InitialLaw::Gaussian { mean: at, var: 0.0 }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            InitialLaw::Gaussian { mean, .. } | InitialLaw::TwoPoint { mean, .. } => mean,
        }
    }

    pub fn var(&self) -> f64 {
        match *self {
            InitialLaw::Gaussian { var, .. } | InitialLaw::TwoPoint { var, .. } => var,
        }
    }

    /// Map one standard normal draw to a draw from this law.
    ///
    /// Using a single normal per particle keeps initial states a pure
    /// function of the particle's counter stream.
    #[inline]
    pub fn from_normal(&self, z: f64) -> f64 {
        match *self {
            InitialLaw::Gaussian { mean, var } => mean + var.sqrt() * z,
            InitialLaw::TwoPoint { mean, var } => {
                if z < 0.0 {
                    mean - var.sqrt()
                } else {
                    mean + var.sqrt()
                }
            }
        }
    }

    pub fn raw_moment(&self, k: usize) -> f64 {
        self.as_mixture().moment(k)
    }

    /// The law as a (degenerate) Gaussian mixture.
    pub fn as_mixture(&self) -> GaussianMixtureLaw {
        match *self {
            InitialLaw::Gaussian { mean, var } => GaussianMixtureLaw::new(vec![MixtureComponent {
                weight: 1.0,
                mean,
                var,
            }]),
            InitialLaw::TwoPoint { mean, var } => {
                let s = var.sqrt();
                GaussianMixtureLaw::new(vec![
                    MixtureComponent {
                        weight: 0.5,
                        mean: mean - s,
                        var: 0.0,
                    },
                    MixtureComponent {
                        weight: 0.5,
                        mean: mean + s,
                        var: 0.0,
                    },
                ])
            }
        }
    }

    fn check(&self) -> Result<()> {
        let (m, v) = (self.mean(), self.var());
        if !m.is_finite() || !v.is_finite() || v < 0.0 {
            return Err(Error::Domain(format!(
                "initial law needs finite mean and nonnegative variance, got mean={m}, var={v}"
            )));
        }
        Ok(())
    }

    /// Sampler-level fourth-moment check: the empirical fourth moment of a
    /// large sample drawn through [`InitialLaw::from_normal`] must be finite
    /// and within 10% of the analytic value.
    pub fn check_fourth_moment(&self, normals: &[f64]) -> Result<()> {
        self.check()?;
        let m4: f64 = normals
            .iter()
            .map(|&z| self.from_normal(z).powi(4))
            .sum::<f64>()
            / normals.len() as f64;
        let exact = self.raw_moment(4);
        if !m4.is_finite() || (m4 - exact).abs() > 0.1 * exact.max(1e-12) {
            return Err(Error::Domain(format!(
                "sampled fourth moment {m4} inconsistent with analytic {exact}"
            )));
        }
        Ok(())
    }
}

/// Constants of the LQ model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Mean-reversion drift gain.
    pub b_bar: f64,
    /// Cross-term cost weight.
    pub q: f64,
    /// Running cost weight.
    pub eps: f64,
    /// Terminal cost weight.
    pub g_bar: f64,
    pub sigma: f64,
    pub sigma0: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub mu0: InitialLaw,
}

impl ModelParams {
    /// `b̄ = 1, q = 0.5, ε = 1, ḡ = 0.3, σ = 0.5, σ₀ = 0.3, T = 1, μ₀ = N(0, 1)`.
    pub fn baseline() -> Self {
        ModelParams {
            b_bar: 1.0,
            q: 0.5,
            eps: 1.0,
            g_bar: 0.3,
            sigma: 0.5,
            sigma0: 0.3,
            horizon: 1.0,
            mu0: InitialLaw::standard_gaussian(),
        }
    }

    /// Checks needed for every closed-form operation to be well defined:
    /// finite inputs, `q² ≤ ε`, `T > 0`, nonnegative volatilities.
    pub fn check_domain(&self) -> Result<()> {
        let fields = [
            ("b_bar", self.b_bar),
            ("q", self.q),
            ("eps", self.eps),
            ("g_bar", self.g_bar),
            ("sigma", self.sigma),
            ("sigma0", self.sigma0),
            ("T", self.horizon),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be finite, got {v}")));
            }
        }
        if self.q * self.q > self.eps * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "q² = {} exceeds eps = {}",
                self.q * self.q,
                self.eps
            )));
        }
        if self.horizon <= 0.0 {
            return Err(Error::Domain(format!("T must be positive, got {}", self.horizon)));
        }
        if self.sigma < 0.0 || self.sigma0 < 0.0 {
            return Err(Error::Domain("volatilities must be nonnegative".into()));
        }
        if self.g_bar < 0.0 {
            return Err(Error::Domain(format!("g_bar must be nonnegative, got {}", self.g_bar)));
        }
        self.mu0.check()
    }

    /// The strict standing assumptions `b̄, ḡ, ε > 0`, `σ > 0`. Degenerate
    /// configurations used as controls violate these on purpose, so this is
    /// reported separately from [`ModelParams::check_domain`].
    pub fn standing_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.b_bar <= 0.0 {
            out.push(format!("b_bar = {} is not > 0", self.b_bar));
        }
        if self.g_bar <= 0.0 {
            out.push(format!("g_bar = {} is not > 0", self.g_bar));
        }
        if self.eps <= 0.0 {
            out.push(format!("eps = {} is not > 0", self.eps));
        }
        if self.sigma <= 0.0 {
            out.push(format!("sigma = {} is not > 0", self.sigma));
        }
        out
    }

    /// `ε − q²`, clamped at zero against rounding.
    fn net_cost(&self) -> f64 {
        (self.eps - self.q * self.q).max(0.0)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::Range(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        Ok(())
    }
}

/// Number of players: finite or the mean field limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Population {
    Finite(usize),
    Infinite,
}

impl Population {
    /// `1 − 1/n²`, exactly 1 in the limit.
    pub fn interaction_factor(self) -> f64 {
        match self {
            Population::Finite(n) => {
                let n = n as f64;
                1.0 - 1.0 / (n * n)
            }
            Population::Infinite => 1.0,
        }
    }

    fn check(self) -> Result<()> {
        match self {
            Population::Finite(0) => Err(Error::Domain("population size must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for Population {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Population::Finite(n) => write!(f, "{n}"),
            Population::Infinite => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Population {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(Population::Infinite),
            other => other
                .parse::<usize>()
                .ok()
                .filter(|n| *n >= 1)
                .map(Population::Finite)
                .ok_or_else(|| Error::Domain(format!("expected a positive integer or `inf`, got `{s}`"))),
        }
    }
}

/// Roots `δ⁻ ≤ δ⁺` of the characteristic polynomial of the Riccati flow.
pub fn riccati_roots(n: Population, p: &ModelParams) -> (f64, f64) {
    let a = n.interaction_factor();
    let bq = p.b_bar + p.q;
    let disc = (bq * bq + a * p.net_cost()).sqrt();
    (-bq - disc, -bq + disc)
}

/// Explicit solution `φⁿ_t` of
/// `φ̇ = 2(b̄+q)φ + (1 − 1/n²)φ² − (ε − q²)`, `φ_T = ḡ`.
///
/// The textbook ratio is divided through by `δ⁺ − δ⁻` and written with
/// `expm1`, which removes the 0/0 at `δ⁺ = δ⁻`; for long horizons the ratio
/// is instead divided by `e^{(δ⁺−δ⁻)(T−t)} − 1` so nothing overflows.
pub fn phi_closed_form(t: f64, n: Population, p: &ModelParams) -> Result<f64> {
    p.check_domain()?;
    p.check_time(t)?;
    n.check()?;
    Ok(phi_unchecked(t, n, p))
}

#[inline]
fn phi_unchecked(t: f64, n: Population, p: &ModelParams) -> f64 {
    let a = n.interaction_factor();
    let c = p.net_cost();
    let g = p.g_bar;
    let (dm, dp) = riccati_roots(n, p);
    let gap = dp - dm;
    let tau = p.horizon - t;
    let x = gap * tau;
    if x <= 1.0 {
        // r = (e^{gap τ} − 1) / gap
        let r = tau * exprel(x);
        let num = -c * r - g * (dp * r + 1.0);
        let den = dm * r - 1.0 - g * a * r;
        num / den
    } else {
        // s = gap / (e^{gap τ} − 1)
        let s = gap / x.exp_m1();
        let num = -c - g * dp - g * s;
        let den = dm - s - g * a;
        num / den
    }
}

/// Values of a Riccati solution on an increasing time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub population: Population,
}

impl RiccatiCurve {
    /// Closed form sampled on `steps + 1` uniform points of `[0, T]`.
    pub fn closed_form(n: Population, p: &ModelParams, steps: usize) -> Result<Self> {
        p.check_domain()?;
        n.check()?;
        if steps == 0 {
            return Err(Error::Construction("curve needs at least one step".into()));
        }
        let grid = uniform_grid(p.horizon, steps);
        let values = grid.iter().map(|&t| phi_unchecked(t, n, p)).collect();
        Ok(RiccatiCurve {
            grid,
            values,
            population: n,
        })
    }

    pub fn sup_distance(&self, other: &RiccatiCurve) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,phi")?;
        for (t, v) in self.grid.iter().zip(&self.values) {
            writeln!(out, "{t:.12e},{v:.17e}")?;
        }
        Ok(())
    }
}

fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    let h = horizon / steps as f64;
    (0..=steps)
        .map(|k| if k == steps { horizon } else { k as f64 * h })
        .collect()
}

/// Classical RK4 integration of the Riccati ODE backward from `φ_T = ḡ`.
/// Independent of [`phi_closed_form`]; used to cross-check it.
pub fn riccati_ode_oracle(n: Population, p: &ModelParams, steps: usize) -> Result<RiccatiCurve> {
    p.check_domain()?;
    n.check()?;
    if steps < 100 {
        return Err(Error::Domain(format!("oracle needs >= 100 steps, got {steps}")));
    }
    let a = n.interaction_factor();
    let bq2 = 2.0 * (p.b_bar + p.q);
    let c = p.eps - p.q * p.q;
    // dφ/dτ with τ = T − t
    let rhs = |phi: f64| -(bq2 * phi + a * phi * phi - c);
    let h = p.horizon / steps as f64;
    let mut values = vec![0.0; steps + 1];
    let mut phi = p.g_bar;
    values[steps] = phi;
    for k in (0..steps).rev() {
        let k1 = rhs(phi);
        let k2 = rhs(phi + 0.5 * h * k1);
        let k3 = rhs(phi + 0.5 * h * k2);
        let k4 = rhs(phi + h * k3);
        phi += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !phi.is_finite() || phi.abs() > 1e12 {
            return Err(Error::Integration(format!(
                "Riccati solution blew up at t = {}",
                k as f64 * h
            )));
        }
        values[k] = phi;
    }
    Ok(RiccatiCurve {
        grid: uniform_grid(p.horizon, steps),
        values,
        population: n,
    })
}

/// `sup_t |(1 − 1/n)φⁿ_t − φ^∞_t|` over a uniform grid of `grid_steps` intervals.
pub fn coupling_gap(n: usize, p: &ModelParams, grid_steps: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Domain(format!("coupling gap needs n >= 2, got {n}")));
    }
    let finite = RiccatiCurve::closed_form(Population::Finite(n), p, grid_steps)?;
    let limit = RiccatiCurve::closed_form(Population::Infinite, p, grid_steps)?;
    let scale = 1.0 - 1.0 / n as f64;
    Ok(finite
        .values
        .iter()
        .zip(&limit.values)
        .map(|(a, b)| (scale * a - b).abs())
        .fold(0.0, f64::max))
}

/// `cₙ(t) = b̄ + q + (1 − 1/n)φⁿ_t`, the Nash mean-reversion rate.
pub fn drift_rate_nash(t: f64, n: usize, p: &ModelParams) -> Result<f64> {
    let phi = phi_closed_form(t, Population::Finite(n), p)?;
    Ok(p.b_bar + p.q + phi * (1.0 - 1.0 / n as f64))
}

/// `c(t) = b̄ + q + φ^∞_t`, the mean field rate.
pub fn drift_rate_mkv(t: f64, p: &ModelParams) -> Result<f64> {
    let phi = phi_closed_form(t, Population::Infinite, p)?;
    Ok(p.b_bar + p.q + phi)
}

/// Master field `U(t, x, m) = ½ φ^∞_t (m̄ − x)²`.
pub fn master_value(t: f64, x: f64, mbar: f64, p: &ModelParams) -> Result<f64> {
    let phi = phi_closed_form(t, Population::Infinite, p)?;
    Ok(0.5 * phi * (mbar - x) * (mbar - x))
}

/// `∂ₓU(t, x, m) = −φ^∞_t (m̄ − x)`.
pub fn master_dx(t: f64, x: f64, mbar: f64, p: &ModelParams) -> Result<f64> {
    let phi = phi_closed_form(t, Population::Infinite, p)?;
    Ok(-phi * (mbar - x))
}

/// One Gaussian component of a mixture law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub var: f64,
}

/// Finite Gaussian mixture. Components with zero variance are atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureLaw {
    components: Vec<MixtureComponent>,
}

/// Highest raw moment a mixture law exposes.
pub const MAX_LAW_MOMENT: usize = 12;

impl GaussianMixtureLaw {
    pub fn new(components: Vec<MixtureComponent>) -> Self {
        GaussianMixtureLaw { components }
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.components
            .iter()
            .map(|c| c.weight * (c.var + (c.mean - m) * (c.mean - m)))
            .sum()
    }

    /// Density; atoms contribute nothing (they have no density).
    pub fn density(&self, x: f64) -> f64 {
        let norm = (2.0 * std::f64::consts::PI).sqrt();
        self.components
            .iter()
            .filter(|c| c.var > 0.0)
            .map(|c| {
                let z = (x - c.mean) / c.var.sqrt();
                c.weight * (-0.5 * z * z).exp() / (norm * c.var.sqrt())
            })
            .sum()
    }

    /// Raw moment `∫ x^k dμ` for `k ≤ 12`.
    ///
    /// # Panics
    /// If `k > 12`.
    pub fn moment(&self, k: usize) -> f64 {
        self.moments(k)[k]
    }

    /// Raw moments `0..=max_k`; entry 0 is exactly 1 for probability laws
    /// whose weights sum to 1.
    pub fn moments(&self, max_k: usize) -> Vec<f64> {
        assert!(max_k <= MAX_LAW_MOMENT, "moment order {max_k} above {MAX_LAW_MOMENT}");
        let mut out = vec![0.0; max_k + 1];
        for c in &self.components {
            let m = gaussian_raw_moments(c.mean, c.var, max_k);
            for (o, v) in out.iter_mut().zip(m) {
                *o += c.weight * v;
            }
        }
        if self.components.len() == 1 {
            out[0] = 1.0;
        }
        out
    }

    /// `∫ f dμ` by 201-point Gauss–Hermite per component. The 151-point
    /// rule is evaluated alongside; a disagreement above `tol` is reported
    /// as non-convergence.
    pub fn expect(&self, f: impl Fn(f64) -> f64, tol: f64) -> Result<f64> {
        let fine = GaussHermite::standard();
        let coarse = GaussHermite::coarse();
        let mut total = 0.0;
        let mut total_coarse = 0.0;
        for c in &self.components {
            if c.var == 0.0 {
                let v = c.weight * f(c.mean);
                total += v;
                total_coarse += v;
            } else {
                let sd = c.var.sqrt();
                total += c.weight * fine.expect(c.mean, sd, &f);
                total_coarse += c.weight * coarse.expect(c.mean, sd, &f);
            }
        }
        if !total.is_finite() || (total - total_coarse).abs() > tol * total.abs().max(1.0) {
            return Err(Error::Numeric(format!(
                "quadrature did not converge: 201-point {total} vs 151-point {total_coarse}"
            )));
        }
        Ok(total)
    }

    /// Affine push-forward `x ↦ scale·x + shift` followed by convolution with
    /// `N(0, extra_var)`.
    pub fn transform(&self, scale: f64, shift: f64, extra_var: f64) -> Self {
        GaussianMixtureLaw::new(
            self.components
                .iter()
                .map(|c| MixtureComponent {
                    weight: c.weight,
                    mean: scale * c.mean + shift,
                    var: scale * scale * c.var + extra_var,
                })
                .collect(),
        )
    }
}

/// Default number of intervals of the quadrature grid behind `ℓ_t`.
pub const FLOW_GRID_INTERVALS: usize = 4000;

/// Deterministic part of the conditional law flow `t ↦ μ_t`.
///
/// Tabulates `Λ_t = ∫₀ᵗ c(s) ds` (so `ℓ_t = e^{−Λ_t}`) and
/// `V_t = ∫₀ᵗ ℓ_s^{−2} ds` on a uniform grid. The pair solves the
/// triangular system `Λ' = c`, `V' = e^{2Λ}`; a fourth-order Runge–Kutta
/// step on it reduces to Simpson's rule in the first component.
#[derive(Debug, Clone)]
pub struct MeanFieldFlow {
    params: ModelParams,
    h: f64,
    lam: Vec<f64>,
    v: Vec<f64>,
}

impl MeanFieldFlow {
    pub fn new(p: &ModelParams) -> Result<Self> {
        Self::with_intervals(p, FLOW_GRID_INTERVALS)
    }

    pub fn with_intervals(p: &ModelParams, intervals: usize) -> Result<Self> {
        p.check_domain()?;
        if intervals < 1000 {
            return Err(Error::Domain(format!(
                "flow quadrature needs >= 1000 intervals, got {intervals}"
            )));
        }
        let h = p.horizon / intervals as f64;
        let mut lam = vec![0.0; intervals + 1];
        let mut v = vec![0.0; intervals + 1];
        for j in 0..intervals {
            let t = j as f64 * h;
            let (dl, dv) = rk4_flow_step(p, t, h, lam[j]);
            lam[j + 1] = lam[j] + dl;
            v[j + 1] = v[j] + dv;
        }
        Ok(MeanFieldFlow {
            params: *p,
            h,
            lam,
            v,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// `(Λ_t, V_t)` at an arbitrary `t ∈ [0, T]`.
    fn integrals(&self, t: f64) -> Result<(f64, f64)> {
        self.params.check_time(t)?;
        let pos = t / self.h;
        let j = (pos.floor() as usize).min(self.lam.len() - 1);
        let frac = t - j as f64 * self.h;
        if frac.abs() <= 1e-13 * self.params.horizon {
            return Ok((self.lam[j], self.v[j]));
        }
        let (dl, dv) = rk4_flow_step(&self.params, j as f64 * self.h, frac, self.lam[j]);
        Ok((self.lam[j] + dl, self.v[j] + dv))
    }

    /// `ℓ_t = exp(−∫₀ᵗ (b̄ + q + φ^∞_s) ds)`.
    pub fn ell(&self, t: f64) -> Result<f64> {
        Ok((-self.integrals(t)?.0).exp())
    }

    /// `∫₀ᵗ ℓ_s^{−2} ds`.
    pub fn inverse_square_integral(&self, t: f64) -> Result<f64> {
        Ok(self.integrals(t)?.1)
    }

    /// Variance added by the idiosyncratic noise: `σ² ℓ_t² ∫₀ᵗ ℓ_s^{−2} ds`.
    pub fn spread_variance(&self, t: f64) -> Result<f64> {
        let (lam, v) = self.integrals(t)?;
        let ell = (-lam).exp();
        Ok(self.params.sigma * self.params.sigma * ell * ell * v)
    }

    /// Conditional law `μ_t` given the common-noise value `W_t = w_t`:
    /// `μ_t = ∫ N(ℓ_t x + (1 − ℓ_t)μ̄₀ + σ₀W_t, σ²ℓ_t²∫₀ᵗℓ_s^{−2}ds) dμ₀(x)`.
    pub fn law_at(&self, t: f64, w_t: f64) -> Result<GaussianMixtureLaw> {
        let (lam, v) = self.integrals(t)?;
        let ell = (-lam).exp();
        let p = &self.params;
        let spread = p.sigma * p.sigma * ell * ell * v;
        let mean0 = p.mu0.mean();
        let shift = (1.0 - ell) * mean0 + p.sigma0 * w_t;
        Ok(p.mu0.as_mixture().transform(ell, shift, spread))
    }

    /// Conditional mean `μ̄_t = μ̄₀ + σ₀ W_t`.
    pub fn conditional_mean(&self, w_t: f64) -> f64 {
        self.params.mu0.mean() + self.params.sigma0 * w_t
    }
}

/// RK4 increment of `(Λ, V)` over `[t, t + h]`.
fn rk4_flow_step(p: &ModelParams, t: f64, h: f64, lam0: f64) -> (f64, f64) {
    let c = |s: f64| p.b_bar + p.q + phi_unchecked(s.min(p.horizon), Population::Infinite, p);
    let c0 = c(t);
    let cm = c(t + 0.5 * h);
    let c1 = c(t + h);
    let k1 = c0;
    let k2 = cm;
    let k3 = cm;
    let k4 = c1;
    let dl = h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    let v1 = (2.0 * lam0).exp();
    let v2 = (2.0 * (lam0 + 0.5 * h * k1)).exp();
    let v3 = (2.0 * (lam0 + 0.5 * h * k2)).exp();
    let v4 = (2.0 * (lam0 + h * k3)).exp();
    let dv = h / 6.0 * (v1 + 2.0 * v2 + 2.0 * v3 + v4);
    (dl, dv)
}

/// Convenience wrapper building a fresh [`MeanFieldFlow`].
pub fn mu_t_explicit(t: f64, w_t: f64, p: &ModelParams) -> Result<GaussianMixtureLaw> {
    MeanFieldFlow::new(p)?.law_at(t, w_t)
}

/// Central moment of `N(0, var)` of order `k`.
pub fn gaussian_central_moment(var: f64, k: usize) -> f64 {
    gaussian_raw_moments(0.0, var, k)[k]
}

/// `E[(Y + Z)^k]` from raw moments of `Y` and of an independent `Z`.
pub fn convolve_moments(a: &[f64], b: &[f64], k: usize) -> f64 {
    (0..=k).map(|j| binomial(k, j) * a[j] * b[k - j]).sum()
}
