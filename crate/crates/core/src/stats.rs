//! Statistical helpers: Monte Carlo summaries, rate fits, two-sample
//! Kolmogorov–Smirnov and Mardia's multivariate normality test.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numeric::{exact_sum, inverse_spd, solve_spd};

/// Sample mean with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    exact_sum(xs.iter().copied()) / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    exact_sum(xs.iter().map(|x| (x - m) * (x - m))) / (xs.len() as f64 - 1.0)
}

pub fn estimate(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return Estimate {
            mean: xs.first().copied().unwrap_or(f64::NAN),
            se: f64::NAN,
        };
    }
    Estimate {
        mean: mean(xs),
        se: (variance(xs) / n).sqrt(),
    }
}

/// Sample variance with a standard error from the fourth central moment:
/// `Var(s²) ≈ (μ₄ − σ⁴ (n−3)/(n−1)) / n`.
pub fn variance_estimate(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let m = mean(xs);
    let s2 = variance(xs);
    let m4 = exact_sum(xs.iter().map(|x| (x - m).powi(4))) / n;
    let var_s2 = (m4 - s2 * s2 * (n - 3.0) / (n - 1.0)) / n;
    Estimate {
        mean: s2,
        se: var_s2.max(0.0).sqrt(),
    }
}

/// Sample covariance matrix (row-major `dim × dim`) of row vectors.
pub fn covariance_matrix(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows[0].len();
    let n = rows.len() as f64;
    let means: Vec<f64> = (0..dim)
        .map(|j| exact_sum(rows.iter().map(|r| r[j])) / n)
        .collect();
    let mut cov = vec![0.0; dim * dim];
    for a in 0..dim {
        for b in a..dim {
            let c = exact_sum(rows.iter().map(|r| (r[a] - means[a]) * (r[b] - means[b]))) / (n - 1.0);
            cov[a * dim + b] = c;
            cov[b * dim + a] = c;
        }
    }
    cov
}

/// Straight-line fit `y ≈ intercept + slope · x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub r_squared: f64,
}

/// Weighted least squares with weights `1 / sd_i²`.
///
/// When every `sd_i` is zero (deterministic data) this falls back to
/// ordinary least squares with a residual-based standard error.
pub fn weighted_line_fit(x: &[f64], y: &[f64], sd: &[f64]) -> Result<LineFit> {
    if x.len() < 2 || x.len() != y.len() || y.len() != sd.len() {
        return Err(Error::Domain(format!(
            "line fit needs >= 2 matched points, got {}",
            x.len()
        )));
    }
    let deterministic = sd.iter().all(|s| *s == 0.0);
    let w: Vec<f64> = if deterministic {
        vec![1.0; x.len()]
    } else {
        sd.iter().map(|s| 1.0 / (s * s).max(1e-300)).collect()
    };
    let sw: f64 = w.iter().sum();
    let xm = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(&w).map(|(a, b)| b * (a - xm).powi(2)).sum();
    let sxy: f64 = x
        .iter()
        .zip(y)
        .zip(&w)
        .map(|((a, c), b)| b * (a - xm) * (c - ym))
        .sum();
    if sxx <= 0.0 {
        return Err(Error::Domain("line fit with a single abscissa".into()));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .zip(&w)
        .map(|((a, c), b)| b * (c - intercept - slope * a).powi(2))
        .sum();
    let ss_tot: f64 = y.iter().zip(&w).map(|(c, b)| b * (c - ym).powi(2)).sum();
    let slope_se = if deterministic {
        if x.len() > 2 {
            (ss_res / (x.len() as f64 - 2.0) / sxx).sqrt()
        } else {
            0.0
        }
    } else {
        (1.0 / sxx).sqrt()
    };
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(LineFit {
        slope,
        intercept,
        slope_se,
        r_squared,
    })
}

/// Ordinary least squares of `y` on the columns of `design` (row-major,
/// `rows × p`). Returns coefficients and their classical standard errors.
pub fn least_squares(design: &[f64], y: &[f64], p: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = y.len();
    assert_eq!(design.len(), rows * p, "design shape");
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for r in 0..rows {
        let row = &design[r * p..(r + 1) * p];
        for a in 0..p {
            xty[a] += row[a] * y[r];
            for b in 0..p {
                xtx[a * p + b] += row[a] * row[b];
            }
        }
    }
    // Scale columns so the normal equations are well conditioned.
    let scale: Vec<f64> = (0..p).map(|a| xtx[a * p + a].sqrt().max(1e-300)).collect();
    let mut scaled = xtx.clone();
    for a in 0..p {
        for b in 0..p {
            scaled[a * p + b] /= scale[a] * scale[b];
        }
    }
    let rhs: Vec<f64> = (0..p).map(|a| xty[a] / scale[a]).collect();
    let beta_scaled = solve_spd(&scaled, &rhs)?;
    let beta: Vec<f64> = (0..p).map(|a| beta_scaled[a] / scale[a]).collect();

    let mut ss_res = 0.0;
    for r in 0..rows {
        let row = &design[r * p..(r + 1) * p];
        let fit: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
        ss_res += (y[r] - fit).powi(2);
    }
    let sigma2 = ss_res / (rows as f64 - p as f64);
    let inv = inverse_spd(&scaled, p)?;
    let se = (0..p)
        .map(|a| (sigma2 * inv[a * p + a]).sqrt() / scale[a])
        .collect();
    Ok((beta, se))
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let x = a[i].min(b[j]);
        while i < na && a[i] <= x {
            i += 1;
        }
        while j < nb && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_survival(lambda))
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = sign * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 * sum.abs() {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Mardia's skewness and kurtosis tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MardiaTest {
    pub skewness: f64,
    pub skewness_p: f64,
    pub kurtosis: f64,
    pub kurtosis_p: f64,
}

pub fn mardia(rows: &[Vec<f64>]) -> Result<MardiaTest> {
    let n = rows.len();
    let dim = rows[0].len();
    let nf = n as f64;
    let means: Vec<f64> = (0..dim)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / nf)
        .collect();
    // Biased (1/n) covariance, as in Mardia's definition.
    let mut cov = vec![0.0; dim * dim];
    for r in rows {
        for a in 0..dim {
            for b in 0..dim {
                cov[a * dim + b] += (r[a] - means[a]) * (r[b] - means[b]) / nf;
            }
        }
    }
    let inv = inverse_spd(&cov, dim)?;
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&means).map(|(x, m)| x - m).collect())
        .collect();
    let quad = |u: &[f64], v: &[f64]| -> f64 {
        let mut s = 0.0;
        for a in 0..dim {
            for b in 0..dim {
                s += u[a] * inv[a * dim + b] * v[b];
            }
        }
        s
    };
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for i in 0..n {
        b2 += quad(&centered[i], &centered[i]).powi(2);
        for j in 0..n {
            b1 += quad(&centered[i], &centered[j]).powi(3);
        }
    }
    b1 /= nf * nf;
    b2 /= nf;
    let p = dim as f64;
    let skew_stat = nf * b1 / 6.0;
    let dof = p * (p + 1.0) * (p + 2.0) / 6.0;
    let chi = ChiSquared::new(dof).map_err(|e| Error::Numeric(e.to_string()))?;
    let skewness_p = 1.0 - chi.cdf(skew_stat);
    let kurt_z = (b2 - p * (p + 2.0)) / (8.0 * p * (p + 2.0) / nf).sqrt();
    let normal = Normal::standard();
    let kurtosis_p = 2.0 * (1.0 - normal.cdf(kurt_z.abs()));
    Ok(MardiaTest {
        skewness: b1,
        skewness_p,
        kurtosis: b2,
        kurtosis_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_recovers_exact_slope() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * v).collect();
        let fit = weighted_line_fit(&x, &y, &[0.0; 4]).unwrap();
        assert!((fit.slope + 2.0).abs() < 1e-14);
        assert!((fit.intercept - 3.0).abs() < 1e-14);
        assert!(fit.r_squared > 1.0 - 1e-12);
        let fit = weighted_line_fit(&x, &y, &[0.1, 0.2, 0.1, 0.3]).unwrap();
        assert!((fit.slope + 2.0).abs() < 1e-12);
    }

    #[test]
    fn least_squares_two_regressors() {
        let mut design = Vec::new();
        let mut y = Vec::new();
        for i in 0..50 {
            let a = i as f64;
            let b = ((i * 7) % 11) as f64;
            design.extend([a, b]);
            y.push(2.0 * a - 0.5 * b);
        }
        let (beta, _) = least_squares(&design, &y, 2).unwrap();
        assert!((beta[0] - 2.0).abs() < 1e-12);
        assert!((beta[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn ks_identical_and_shifted() {
        let a: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        let (d, p) = ks_two_sample(&a, &a);
        assert_eq!(d, 0.0);
        assert_eq!(p, 1.0);
        let b: Vec<f64> = a.iter().map(|x| x + 0.5).collect();
        let (d, p) = ks_two_sample(&a, &b);
        assert!((d - 0.5).abs() < 0.01);
        assert!(p < 1e-20);
    }

    #[test]
    fn kolmogorov_known_quantile() {
        // P(K > 1.3581) = 0.05
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 1e-4);
    }

    #[test]
    fn variance_estimate_constant_data() {
        let v = variance_estimate(&[2.0, 2.0, 2.0, 2.0]);
        assert_eq!(v.mean, 0.0);
    }
}
