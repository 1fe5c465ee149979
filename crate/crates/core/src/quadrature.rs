//! Quadrature rules: Gauss-Hermite for the standard Gaussian, composite
//! trapezoid on a truncated interval, and adaptive Gauss-Kronrod.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("Newton iteration for Gauss-Hermite root {index} of {n} did not converge")]
    NoConvergence { index: usize, n: usize },
    #[error("adaptive quadrature on [{a}, {b}] did not reach tolerance {tol:e} (estimate {err:e})")]
    Tolerance { a: f64, b: f64, tol: f64, err: f64 },
    #[error("integrand returned a non-finite value at {at}")]
    NonFinite { at: f64 },
}

/// Nodes and weights such that `sum w_i f(m_i) ~ E[f(N(0, 1))]`.
/// Nodes are sorted ascending; weights sum to 1.
pub fn gauss_hermite_standard_normal(n: usize) -> Result<(Vec<f64>, Vec<f64>), QuadratureError> {
    assert!(n >= 1);
    // Eigenvalues of the Jacobi matrix of the probabilists' Hermite
    // polynomials (zero diagonal, off-diagonal sqrt(k)) give the nodes;
    // each is then polished by Newton on the orthonormal recurrence.
    let mut diag = vec![0.0; n];
    let mut off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    off.push(0.0);
    symmetric_tridiagonal_eigenvalues(&mut diag, &mut off)?;
    diag.sort_by(f64::total_cmp);

    let mut nodes = Vec::with_capacity(n);
    let mut log_weights = Vec::with_capacity(n);
    for (i, &guess) in diag.iter().enumerate() {
        let mut z = guess;
        let mut converged = false;
        let mut state = orthonormal_he(n, z);
        for _ in 0..50 {
            let step = state.value / state.derivative;
            z -= step;
            state = orthonormal_he(n, z);
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(QuadratureError::NoConvergence { index: i, n });
        }
        nodes.push(z);
        // w = 1 / (n * h_{n-1}(z)^2) for the normalized polynomials
        log_weights.push(-(n as f64).ln() - 2.0 * state.log_prev);
    }
    // symmetrize: roots come in +/- pairs
    for i in 0..n / 2 {
        let r = 0.5 * (nodes[n - 1 - i] - nodes[i]);
        nodes[i] = -r;
        nodes[n - 1 - i] = r;
        let lw = 0.5 * (log_weights[i] + log_weights[n - 1 - i]);
        log_weights[i] = lw;
        log_weights[n - 1 - i] = lw;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let top = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = log_weights.iter().map(|lw| (lw - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    Ok((nodes, weights))
}

struct HermiteState {
    value: f64,
    derivative: f64,
    log_prev: f64,
}

/// Normalized `He_n(z) / sqrt(n!)`, its derivative and `ln |h_{n-1}(z)|`,
/// rescaled as it goes so large `n` does not overflow. Value and
/// derivative share one unknown scale; only their ratio is meaningful.
fn orthonormal_he(n: usize, z: f64) -> HermiteState {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut log_scale = 0.0;
    for k in 1..=n {
        let kf = k as f64;
        let next = (z * cur - ((kf - 1.0).sqrt()) * prev) / kf.sqrt();
        prev = cur;
        cur = next;
        if cur.abs() > 1e100 {
            cur *= 1e-100;
            prev *= 1e-100;
            log_scale += 100.0 * std::f64::consts::LN_10;
        }
    }
    // h_n' = sqrt(n) h_{n-1}
    HermiteState {
        value: cur,
        derivative: (n as f64).sqrt() * prev,
        log_prev: prev.abs().ln() + log_scale,
    }
}

/// Implicit QL with Wilkinson shifts; eigenvalues overwrite `d`.
/// `e[i]` couples rows `i` and `i+1`; `e[n-1]` is scratch.
fn symmetric_tridiagonal_eigenvalues(d: &mut [f64], e: &mut [f64]) -> Result<(), QuadratureError> {
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
            if iter > 60 {
                return Err(QuadratureError::NoConvergence { index: l, n });
            }
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
    Ok(())
}

/// Composite trapezoid rule with `n` equispaced points on `[a, b]`
/// (unnormalized weights).
pub fn trapezoid(a: f64, b: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2 && b > a);
    let h = (b - a) / (n - 1) as f64;
    let nodes: Vec<f64> = (0..n).map(|i| a + h * i as f64).collect();
    let mut weights = vec![h; n];
    weights[0] = 0.5 * h;
    weights[n - 1] = 0.5 * h;
    (nodes, weights)
}

const GL4_X: [f64; 2] = [0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
const GL4_W: [f64; 2] = [0.652_145_154_862_546_1, 0.347_854_845_137_453_9];

/// Four-point Gauss-Legendre on `[a, b]`.
pub fn gauss_legendre4<F, E>(a: f64, b: f64, mut f: F) -> Result<f64, E>
where
    F: FnMut(f64) -> Result<f64, E>,
{
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let mut s = 0.0;
    for k in 0..2 {
        s += GL4_W[k] * (f(c - r * GL4_X[k])? + f(c + r * GL4_X[k])?);
    }
    Ok(s * r)
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let pair = f(c - r * XGK[j]) + f(c + r * XGK[j]);
        kron += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kron * r, ((kron - gauss) * r).abs())
}

/// Globally adaptive Gauss-Kronrod (7/15) integration to absolute
/// tolerance `tol`.
pub fn integrate_adaptive<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    tol: f64,
) -> Result<f64, QuadratureError> {
    if a == b {
        return Ok(0.0);
    }
    let mut intervals = vec![(a, b, gk15(&f, a, b))];
    for _ in 0..10_000 {
        let (total, err): (f64, f64) = intervals
            .iter()
            .fold((0.0, 0.0), |(s, e), (_, _, (v, ev))| (s + v, e + ev));
        if !total.is_finite() {
            return Err(QuadratureError::NonFinite { at: a });
        }
        if err <= tol {
            return Ok(total);
        }
        let worst = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2 .1.total_cmp(&y.1 .2 .1))
            .map(|(i, _)| i)
            .expect("non-empty");
        let (lo, hi, _) = intervals.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        intervals.push((lo, mid, gk15(&f, lo, mid)));
        intervals.push((mid, hi, gk15(&f, mid, hi)));
    }
    let err = intervals.iter().map(|iv| iv.2 .1).sum();
    Err(QuadratureError::Tolerance { a, b, tol, err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn double_factorial_odd(k: u32) -> f64 {
        (1..=k).map(|j| (2 * j - 1) as f64).product()
    }

    #[test]
    fn hermite_rule_reproduces_normal_moments() {
        for n in [1usize, 2, 5, 16, 64, 128, 256] {
            let (x, w) = gauss_hermite_standard_normal(n).unwrap();
            assert!(x.windows(2).all(|p| p[0] < p[1]));
            assert!(w.iter().all(|&v| v >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            // exact for polynomials up to degree 2n-1
            for k in 1..=(n.min(12) as u32) {
                if 2 * k as usize > 2 * n - 1 {
                    break;
                }
                let moment: f64 = x.iter().zip(&w).map(|(m, w)| w * m.powi(2 * k as i32)).sum();
                let exact = double_factorial_odd(k);
                assert!(
                    (moment - exact).abs() <= 1e-12 * exact,
                    "n={n} k={k}: {moment} vs {exact}"
                );
                let odd: f64 = x.iter().zip(&w).map(|(m, w)| w * m.powi(2 * k as i32 - 1)).sum();
                assert!(odd.abs() < 1e-12 * exact);
            }
        }
    }

    #[test]
    fn hermite_rule_known_small_cases() {
        let (x, w) = gauss_hermite_standard_normal(2).unwrap();
        assert!((x[1] - 1.0).abs() < 1e-15 && (x[0] + 1.0).abs() < 1e-15);
        assert!((w[0] - 0.5).abs() < 1e-15);
        let (x, w) = gauss_hermite_standard_normal(3).unwrap();
        assert!((x[2] - 3f64.sqrt()).abs() < 1e-14);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn adaptive_matches_closed_forms() {
        let v = integrate_adaptive(|s| s.sin(), 0.0, PI, 1e-13).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        let v = integrate_adaptive(|s| (-s / 0.01).exp(), 0.0, 1.0, 1e-13).unwrap();
        assert!((v - 0.01 * (1.0 - (-100f64).exp())).abs() < 1e-13);
        assert_eq!(integrate_adaptive(|s| s, 1.0, 1.0, 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn legendre4_is_exact_for_cubics_and_septics() {
        let v: Result<f64, ()> = gauss_legendre4(-1.0, 2.0, |s| Ok(s.powi(7) - 3.0 * s * s));
        let exact = (2f64.powi(8) - 1.0) / 8.0 - (8.0 + 1.0);
        assert!((v.unwrap() - exact).abs() < 1e-12);
    }
}
