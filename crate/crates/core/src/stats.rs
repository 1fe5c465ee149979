//! Distribution comparison, covariance estimation, rate fitting and the
//! closed-form reference values for the sine coefficient with an
//! Ornstein-Uhlenbeck fast process.

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::quadrature::{self, QuadratureError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    Empty,
    #[error("sample contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("sample is not sorted at index {0}")]
    Unsorted(usize),
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("need at least {need} observations, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// Sorted, finite sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSample {
    values: Vec<f64>,
}

impl EmpiricalSample {
    pub fn new(mut values: Vec<f64>) -> Result<Self, StatsError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(i));
        }
        values.sort_by(f64::total_cmp);
        Self::from_sorted(values)
    }

    pub fn from_sorted(values: Vec<f64>) -> Result<Self, StatsError> {
        if values.is_empty() {
            return Err(StatsError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(i));
        }
        if let Some(i) = values.windows(2).position(|w| w[0] > w[1]) {
            return Err(StatsError::Unsorted(i + 1));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Two-sample Kolmogorov-Smirnov statistic by a merge scan over the
    /// pooled distinct values.
    pub fn ks_two_sample(&self, other: &EmpiricalSample) -> f64 {
        let (a, b) = (&self.values, &other.values);
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let (mut i, mut j) = (0usize, 0usize);
        let mut d = 0.0f64;
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / na - j as f64 / nb).abs());
        }
        // once one sample is exhausted the gap only shrinks toward 0
        d
    }

    /// One-sample Kolmogorov-Smirnov statistic against `N(mean, variance)`.
    pub fn ks_against_gaussian(&self, mean: f64, variance: f64) -> Result<f64, StatsError> {
        if variance.is_nan() || variance <= 0.0 {
            return Err(StatsError::NonPositiveVariance(variance));
        }
        let normal = Normal::new(mean, variance.sqrt()).expect("valid parameters");
        let n = self.values.len() as f64;
        let mut d = 0.0f64;
        for (i, &x) in self.values.iter().enumerate() {
            let f = normal.cdf(x);
            d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
        }
        Ok(d)
    }

    /// 1-Wasserstein distance via the quantile coupling. Equal sizes reduce
    /// to the mean absolute difference of the sorted arrays; unequal sizes
    /// integrate `|Q_a(u) - Q_b(u)|` over the merged quantile breakpoints.
    pub fn wasserstein1(&self, other: &EmpiricalSample) -> f64 {
        let (a, b) = (&self.values, &other.values);
        if a.len() == b.len() {
            return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        }
        let (na, nb) = (a.len(), b.len());
        let (mut i, mut j) = (0usize, 0usize);
        let mut u = 0.0;
        let mut acc = 0.0;
        while i < na && j < nb {
            let ua = (i + 1) as f64 / na as f64;
            let ub = (j + 1) as f64 / nb as f64;
            let next = ua.min(ub);
            acc += (next - u) * (a[i] - b[j]).abs();
            u = next;
            if ua <= next {
                i += 1;
            }
            if ub <= next {
                j += 1;
            }
        }
        acc
    }
}

/// Asymptotic two-sided Kolmogorov coefficient `c(alpha) = sqrt(-ln(alpha/2)/2)`.
pub fn ks_coefficient(alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}

/// Asymptotic critical value of the two-sample statistic at level `alpha`.
pub fn ks_critical_two_sample(n: usize, m: usize, alpha: f64) -> f64 {
    ks_coefficient(alpha) * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// Asymptotic critical value of the one-sample statistic at level `alpha`.
pub fn ks_critical_one_sample(n: usize, alpha: f64) -> f64 {
    ks_coefficient(alpha) / (n as f64).sqrt()
}

pub fn mean_and_stderr(values: &[f64]) -> Result<(f64, f64), StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Unbiased sample variance with its standard error
/// `sqrt((m4 - s^4 (n-3)/(n-1)) / n)`.
pub fn variance_with_stderr(values: &[f64]) -> Result<(f64, f64), StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFew {
            need: 2,
            got: values.len(),
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let se = ((m4 - var * var * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt();
    Ok((var, se))
}

/// Symmetric 2x2 sample covariance with jackknife standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance2x2 {
    pub q11: f64,
    pub q12: f64,
    pub q22: f64,
    pub se11: f64,
    pub se12: f64,
    pub se22: f64,
    pub n: usize,
}

impl Covariance2x2 {
    pub fn q21(&self) -> f64 {
        self.q12
    }
}

/// Unbiased covariance of centered columns plus its delete-one jackknife
/// standard error (NaN below three observations).
fn cov_with_jackknife(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len();
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (u, v) = (a - mx, b - my);
        sx += u;
        sy += v;
        sxy += u * v;
    }
    let cov = (sxy - sx * sy / nf) / (nf - 1.0);
    if n < 3 {
        return (cov, f64::NAN);
    }
    let m = nf - 1.0;
    let loo = |u: f64, v: f64| (sxy - u * v - (sx - u) * (sy - v) / m) / (m - 1.0);
    let mut mean_loo = 0.0;
    for (a, b) in x.iter().zip(y) {
        mean_loo += loo(a - mx, b - my);
    }
    mean_loo /= nf;
    let mut ss = 0.0;
    for (a, b) in x.iter().zip(y) {
        ss += (loo(a - mx, b - my) - mean_loo).powi(2);
    }
    (cov, ((nf - 1.0) / nf * ss).sqrt())
}

pub fn sample_cov(pairs: &[(f64, f64)]) -> Result<Covariance2x2, StatsError> {
    if pairs.len() < 2 {
        return Err(StatsError::TooFew {
            need: 2,
            got: pairs.len(),
        });
    }
    let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (q11, se11) = cov_with_jackknife(&x, &x);
    let (q12, se12) = cov_with_jackknife(&x, &y);
    let (q22, se22) = cov_with_jackknife(&y, &y);
    Ok(Covariance2x2 {
        q11,
        q12,
        q22,
        se11,
        se12,
        se22,
        n: pairs.len(),
    })
}

/// Projection directions `k pi / 8`, `k = 0..8`, for the sliced test.
pub fn slice_directions() -> [(f64, f64); 8] {
    std::array::from_fn(|k| {
        let th = k as f64 * std::f64::consts::PI / 8.0;
        (th.cos(), th.sin())
    })
}

/// Largest two-sample KS statistic over the eight fixed projections of
/// paired samples.
pub fn sliced_ks(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64, StatsError> {
    let mut worst = 0.0f64;
    for (c, s) in slice_directions() {
        let pa = EmpiricalSample::new(a.iter().map(|(y, z)| c * y + s * z).collect())?;
        let pb = EmpiricalSample::new(b.iter().map(|(y, z)| c * y + s * z).collect())?;
        worst = worst.max(pa.ks_two_sample(&pb));
    }
    Ok(worst)
}

/// Least-squares line through `(ln eps, ln error)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Residuals of the points used, in input order.
    pub residuals: Vec<f64>,
    pub used: Vec<usize>,
    /// Indices excluded because the error was not positive or was below
    /// two standard errors.
    pub dropped: Vec<usize>,
}

pub fn fit_rate(eps: &[f64], errors: &[f64]) -> Result<RateFit, StatsError> {
    fit_rate_with_noise(eps, errors, None)
}

pub fn fit_rate_with_noise(
    eps: &[f64],
    errors: &[f64],
    stderrs: Option<&[f64]>,
) -> Result<RateFit, StatsError> {
    if eps.len() != errors.len() {
        return Err(StatsError::LengthMismatch(eps.len(), errors.len()));
    }
    if let Some(se) = stderrs {
        if se.len() != errors.len() {
            return Err(StatsError::LengthMismatch(se.len(), errors.len()));
        }
    }
    let (mut used, mut dropped) = (Vec::new(), Vec::new());
    for i in 0..eps.len() {
        let floor = stderrs.map_or(0.0, |se| 2.0 * se[i]);
        if errors[i] > 0.0 && errors[i] > floor && eps[i] > 0.0 {
            used.push(i);
        } else {
            dropped.push(i);
        }
    }
    if used.len() < 3 {
        return Err(StatsError::TooFew {
            need: 3,
            got: used.len(),
        });
    }
    let xs: Vec<f64> = used.iter().map(|&i| eps[i].ln()).collect();
    let ys: Vec<f64> = used.iter().map(|&i| errors[i].ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - (intercept + slope * x)).collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        residuals,
        used,
        dropped,
    })
}

/// `E[Z_eps(T)^2]` for `sigma(m) = offset + amplitude * sin(m)` with the
/// Ornstein-Uhlenbeck fast process started at `m0`.
///
/// By the Ito isometry `E[Z^2] = int_0^T E[(amplitude sin m_eps(s))^2] ds`, and
/// `m_eps(s) ~ N(m0 e^{-s/eps}, 1 - e^{-2s/eps})` with
/// `E[sin^2 N(a, v)] = (1 - e^{-2v} cos 2a) / 2`. The offset cancels.
pub fn gaussian_sine_moment_oracle(
    eps: f64,
    horizon: f64,
    m0: f64,
    amplitude: f64,
    _offset: f64,
) -> Result<f64, StatsError> {
    if horizon <= 0.0 {
        return Ok(0.0);
    }
    let integrand = |s: f64| {
        let t = s / eps;
        let mean = (-t).exp() * m0;
        let var = -(-2.0 * t).exp_m1();
        (1.0 - (-2.0 * var).exp() * (2.0 * mean).cos()) / 2.0
    };
    // the initial layer has width O(eps); integrate it separately
    let split = (40.0 * eps).min(horizon);
    let layer = quadrature::integrate_adaptive(integrand, 0.0, split, 1e-12)?;
    let rest = quadrature::integrate_adaptive(integrand, split, horizon, 1e-12)?;
    Ok(amplitude * amplitude * (layer + rest))
}

/// Limit of [`gaussian_sine_moment_oracle`] as `eps -> 0`: `amplitude^2 T (1 - e^{-2}) / 2`.
pub fn sine_fluctuation_limit(horizon: f64, amplitude: f64) -> f64 {
    amplitude * amplitude * horizon * (-(-2f64).exp_m1()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sample(v: &[f64]) -> EmpiricalSample {
        EmpiricalSample::new(v.to_vec()).unwrap()
    }

    fn normals(seed: u64, n: usize, scale: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn sample_validation() {
        assert!(matches!(EmpiricalSample::new(vec![]), Err(StatsError::Empty)));
        assert!(matches!(EmpiricalSample::new(vec![1.0, f64::NAN]), Err(StatsError::NonFinite(1))));
        assert!(matches!(EmpiricalSample::from_sorted(vec![1.0, 0.0]), Err(StatsError::Unsorted(1))));
        assert_eq!(sample(&[3.0, 1.0, 2.0]).values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn ks_two_sample_basics() {
        let a = sample(&[0.3, 1.2, -0.5, 2.0]);
        assert_eq!(a.ks_two_sample(&a), 0.0);
        assert_eq!(sample(&[0.0]).ks_two_sample(&sample(&[1.0])), 1.0);
        let b = sample(&[0.0, 0.0, 1.0, 1.0]);
        let c = sample(&[0.0, 1.0]);
        assert_eq!(b.ks_two_sample(&c), 0.0);
        assert_eq!(sample(&[1.0, 2.0, 3.0]).ks_two_sample(&sample(&[2.5])), 2.0 / 3.0);
    }

    #[test]
    fn ks_two_sample_matches_brute_force() {
        // brute force: evaluate both ECDFs at every pooled point
        let a = normals(1, 257, 1.0);
        let b: Vec<f64> = normals(2, 191, 1.3).iter().map(|v| (v * 4.0).round() / 4.0).collect();
        let ecdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        let brute = a
            .iter()
            .chain(&b)
            .map(|&x| (ecdf(&a, x) - ecdf(&b, x)).abs())
            .fold(0.0, f64::max);
        assert!((sample(&a).ks_two_sample(&sample(&b)) - brute).abs() < 1e-15);
    }

    #[test]
    fn ks_null_calibration() {
        let n = 100_000;
        let crit = ks_critical_two_sample(n, n, 0.001);
        assert!((crit - 1.95 * (2.0 / n as f64).sqrt()).abs() < 1e-4);
        let d = sample(&normals(100, n, 1.0)).ks_two_sample(&sample(&normals(200, n, 1.0)));
        assert!(d <= crit, "{d} > {crit}");
    }

    #[test]
    fn ks_gaussian_examples() {
        let n = 1000;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let q: Vec<f64> = (1..=n).map(|i| normal.inverse_cdf((i as f64 - 0.5) / n as f64)).collect();
        let d = sample(&q).ks_against_gaussian(0.0, 1.0).unwrap();
        assert!((d - 0.5 / n as f64).abs() < 1e-9, "{d}");

        let shifted: Vec<f64> = normals(3, 1000, 1.0).iter().map(|v| v + 5.0).collect();
        assert!(sample(&shifted).ks_against_gaussian(0.0, 1.0).unwrap() >= 0.98);
        assert_eq!(sample(&[2.0]).ks_against_gaussian(2.0, 3.0).unwrap(), 0.5);
        assert!(sample(&[2.0]).ks_against_gaussian(2.0, 0.0).is_err());
    }

    #[test]
    fn wasserstein_examples() {
        let a = sample(&[0.5, 1.0, 4.0, -2.0]);
        let b = sample(&[2.5, 3.0, 6.0, 0.0]);
        assert_eq!(a.wasserstein1(&b), 2.0);
        assert_eq!(a.wasserstein1(&a), 0.0);
        let n = 100_000;
        let w = sample(&normals(4, n, 1.0)).wasserstein1(&sample(&normals(5, n, 2.0)));
        assert!((w - (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.01, "{w}");
        // unequal sizes: {0, 1} vs {0, 0.5, 1}: |Q_a - Q_b| is 0.5 on (1/3, 1/2) and (1/2, 2/3)
        let u = sample(&[0.0, 1.0]).wasserstein1(&sample(&[0.0, 0.5, 1.0]));
        assert!((u - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn covariance_examples() {
        let c = sample_cov(&[(1.0, 0.0), (-1.0, 0.0)]).unwrap();
        assert_eq!((c.q11, c.q12, c.q22), (2.0, 0.0, 0.0));
        let t: Vec<(f64, f64)> = normals(6, 500, 1.0).into_iter().map(|v| (v, v)).collect();
        let c = sample_cov(&t).unwrap();
        assert_eq!(c.q12, c.q11);
        assert_eq!(c.q22, c.q11);
        assert!(sample_cov(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn jackknife_matches_brute_force() {
        let x = normals(7, 40, 1.0);
        let y: Vec<f64> = normals(8, 40, 1.0).iter().zip(&x).map(|(a, b)| a + 0.5 * b).collect();
        let pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
        let cov = |p: &[(f64, f64)]| {
            let n = p.len() as f64;
            let mx = p.iter().map(|v| v.0).sum::<f64>() / n;
            let my = p.iter().map(|v| v.1).sum::<f64>() / n;
            p.iter().map(|v| (v.0 - mx) * (v.1 - my)).sum::<f64>() / (n - 1.0)
        };
        let loo: Vec<f64> = (0..pairs.len())
            .map(|i| {
                let rest: Vec<(f64, f64)> = pairs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| *p).collect();
                cov(&rest)
            })
            .collect();
        let n = loo.len() as f64;
        let m = loo.iter().sum::<f64>() / n;
        let se = ((n - 1.0) / n * loo.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sqrt();
        let c = sample_cov(&pairs).unwrap();
        assert!((c.q12 - cov(&pairs)).abs() < 1e-14);
        assert!((c.se12 - se).abs() < 1e-12, "{} vs {se}", c.se12);
    }

    #[test]
    fn rate_fit_examples() {
        let eps = [0.2, 0.1, 0.05, 0.025];
        let lin: Vec<f64> = eps.iter().map(|e| 0.7 * e).collect();
        let f = fit_rate(&eps, &lin).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        let quad: Vec<f64> = eps.iter().map(|e| 3.0 * e * e).collect();
        assert!((fit_rate(&eps, &quad).unwrap().slope - 2.0).abs() < 1e-12);
        assert!(fit_rate(&eps[..2], &lin[..2]).is_err());
        let with_zero = [0.14, 0.07, 0.0, 0.0175];
        let f = fit_rate(&eps, &with_zero).unwrap();
        assert_eq!(f.dropped, vec![2]);
        let f = fit_rate_with_noise(&eps, &lin, Some(&[0.0, 0.0, 0.0, 0.01])).unwrap();
        assert_eq!(f.dropped, vec![3]);
    }

    #[test]
    fn oracle_reference_values() {
        let lim = sine_fluctuation_limit(1.0, 1.0);
        assert!((lim - 0.432_332_358_381_693_6).abs() < 1e-15);
        assert_eq!(gaussian_sine_moment_oracle(0.1, 0.0, 3.0, 1.0, 2.0).unwrap(), 0.0);
        // Frozen from an independent scipy quad evaluation (tolerance 1e-13).
        let v = gaussian_sine_moment_oracle(0.1, 1.0, 3.0, 1.0, 2.0).unwrap();
        assert!((v - 0.447_878_304_787_639_6).abs() < 1e-10, "{v}");
        let err: Vec<f64> = [0.2, 0.1, 0.05, 0.025]
            .iter()
            .map(|&e| (gaussian_sine_moment_oracle(e, 1.0, 3.0, 1.0, 2.0).unwrap() - lim).abs())
            .collect();
        let frozen = [0.031_086_977_804_641_9, 0.015_545_946_405_946, 0.007_772_973_258_762_3, 0.003_886_486_629_381_1];
        for (a, b) in err.iter().zip(frozen) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn oracle_stationary_plug_in() {
        // Replacing the integrand by its stationary value gives a^2 T (1 - e^-2) / 2.
        // The transient part is O(eps); from m0 = 0 it is bounded by eps / 2 in magnitude.
        for eps in [0.5, 0.05, 0.005] {
            let v = gaussian_sine_moment_oracle(eps, 2.0, 0.0, 1.5, 0.0).unwrap();
            let lim = sine_fluctuation_limit(2.0, 1.5);
            assert!((v - lim).abs() <= 1.5 * 1.5 * eps, "eps={eps}");
        }
    }

    #[test]
    fn sliced_ks_detects_correlation() {
        let a: Vec<(f64, f64)> = normals(9, 5000, 1.0).into_iter().zip(normals(10, 5000, 1.0)).collect();
        let b: Vec<(f64, f64)> = normals(11, 5000, 1.0).into_iter().zip(normals(12, 5000, 1.0)).collect();
        let c: Vec<(f64, f64)> = normals(13, 5000, 1.0)
            .into_iter()
            .zip(normals(14, 5000, 1.0))
            .map(|(u, v)| (u, 0.8 * u + 0.6 * v))
            .collect();
        assert!(sliced_ks(&a, &b).unwrap() < ks_critical_two_sample(5000, 5000, 0.001));
        assert!(sliced_ks(&a, &c).unwrap() > 0.1);
    }
}
