//! Poisson equations `-L psi = f` for the Ornstein-Uhlenbeck generator
//! `L f = f'' - m f'`, solved in the probabilists' Hermite basis where
//! `L He_n = -n He_n`.
//!
//! Coefficients are stored in the `He_n` convention (`f = sum f_n He_n`),
//! but all evaluation goes through the normalized polynomials
//! `h_n = He_n / sqrt(n!)` to keep magnitudes bounded.

use thiserror::Error;

use crate::averaging::{AveragedCoefficients, AveragingError, InvariantMeasure, MeasureKind};
use crate::expr::{CoefficientFn, ExprError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoissonError {
    #[error("Poisson solver supports only the Ornstein-Uhlenbeck fast process (standard Gaussian measure)")]
    Unsupported,
    #[error("right-hand side is not centered: mean {mean:e} exceeds {tol:e}")]
    Centering { mean: f64, tol: f64 },
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Averaging(#[from] AveragingError),
}

pub const DEFAULT_DEGREE: usize = 40;
pub const CENTERING_TOL: f64 = 1e-9;
/// Half-width of the window of quadrature nodes used for residual checks.
pub const RESIDUAL_WINDOW: f64 = 6.0;
const TAIL_TOL: f64 = 1e-16;

/// Probabilists' Hermite polynomials up to a fixed degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HermiteBasis {
    pub degree: usize,
}

impl HermiteBasis {
    pub fn new(degree: usize) -> Self {
        Self { degree }
    }

    /// `He_0(m), ..., He_N(m)` by `He_{n+1} = m He_n - n He_{n-1}`.
    pub fn eval_all(&self, m: f64) -> Vec<f64> {
        let mut he = Vec::with_capacity(self.degree + 1);
        he.push(1.0);
        if self.degree >= 1 {
            he.push(m);
        }
        for n in 1..self.degree {
            let next = m * he[n] - n as f64 * he[n - 1];
            he.push(next);
        }
        he
    }

    /// Normalized `h_n = He_n / sqrt(n!)`.
    pub fn eval_normalized(&self, m: f64) -> Vec<f64> {
        let mut h = Vec::with_capacity(self.degree + 1);
        h.push(1.0);
        if self.degree >= 1 {
            h.push(m);
        }
        for n in 1..self.degree {
            let nf = n as f64;
            let next = (m * h[n] - nf.sqrt() * h[n - 1]) / (nf + 1.0).sqrt();
            h.push(next);
        }
        h
    }
}

fn sqrt_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(1.0);
    for k in 1..=n {
        let prev = out[k - 1];
        out.push(prev * (k as f64).sqrt());
    }
    out
}

fn require_gaussian(measure: &InvariantMeasure) -> Result<(), PoissonError> {
    match measure.kind() {
        MeasureKind::StandardGaussian => Ok(()),
        MeasureKind::GibbsFromV => Err(PoissonError::Unsupported),
    }
}

/// Normalized coefficients `c_n = int f h_n dmu`.
fn project_normalized<F>(f: F, degree: usize, measure: &InvariantMeasure) -> Result<Vec<f64>, PoissonError>
where
    F: Fn(f64) -> Result<f64, PoissonError>,
{
    require_gaussian(measure)?;
    let basis = HermiteBasis::new(degree);
    let mut c = vec![0.0; degree + 1];
    for (&m, &w) in measure.nodes().iter().zip(measure.weights()) {
        let fw = w * f(m)?;
        for (cn, hn) in c.iter_mut().zip(basis.eval_normalized(m)) {
            *cn += fw * hn;
        }
    }
    Ok(c)
}

/// `f_n = (int f He_n dmu) / n!` for `n = 0..=degree`.
pub fn project<F>(f: F, degree: usize, measure: &InvariantMeasure) -> Result<Vec<f64>, PoissonError>
where
    F: Fn(f64) -> Result<f64, PoissonError>,
{
    let c = project_normalized(f, degree, measure)?;
    let sf = sqrt_factorials(degree);
    Ok(c.iter().zip(&sf).map(|(cn, s)| cn / s).collect())
}

/// Hermite-coefficient representation of a Poisson solution.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSolution {
    /// `psi_n` in the `He_n` convention; `psi_0 = 0`.
    coeffs: Vec<f64>,
    normalized: Vec<f64>,
    pub x: Option<f64>,
    /// `sum_{n > N/2} f_n^2 n!`, the right-hand side energy in the upper half
    /// of the retained spectrum.
    pub tail_energy: f64,
    pub warning: Option<String>,
}

impl SpectralSolution {
    fn from_normalized(normalized: Vec<f64>, x: Option<f64>, tail_energy: f64, warning: Option<String>) -> Self {
        let sf = sqrt_factorials(normalized.len() - 1);
        let coeffs = normalized.iter().zip(&sf).map(|(c, s)| c / s).collect();
        Self {
            coeffs,
            normalized,
            x,
            tail_energy,
            warning,
        }
    }

    /// Solution with the given `He_n` coefficients (used for exact cases).
    pub fn from_coefficients(coeffs: Vec<f64>) -> Self {
        let sf = sqrt_factorials(coeffs.len().saturating_sub(1));
        let normalized = coeffs.iter().zip(&sf).map(|(c, s)| c * s).collect();
        Self {
            coeffs,
            normalized,
            x: None,
            tail_energy: 0.0,
            warning: None,
        }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn eval(&self, m: f64) -> f64 {
        let h = HermiteBasis::new(self.degree()).eval_normalized(m);
        self.normalized.iter().zip(&h).map(|(c, h)| c * h).sum()
    }

    /// `L psi (m) = -sum n psi_n He_n(m)`, termwise exact.
    pub fn apply_generator(&self, m: f64) -> f64 {
        let h = HermiteBasis::new(self.degree()).eval_normalized(m);
        -self
            .normalized
            .iter()
            .zip(&h)
            .enumerate()
            .map(|(n, (c, h))| n as f64 * c * h)
            .sum::<f64>()
    }

    /// Largest `|psi(m)| / (1 + m^2)` on a grid of `[-8, 8]`.
    pub fn growth_constant(&self) -> f64 {
        (0..=320)
            .map(|i| -8.0 + 0.05 * i as f64)
            .map(|m| self.eval(m).abs() / (1.0 + m * m))
            .fold(0.0, f64::max)
    }
}

/// `L g (m) = g'' - m g'` by central differences with step `1e-4`.
pub fn apply_generator_fd<G: Fn(f64) -> f64>(g: G, m: f64) -> f64 {
    let h = 1e-4;
    let (gp, g0, gm) = (g(m + h), g(m), g(m - h));
    (gp - 2.0 * g0 + gm) / (h * h) - m * (gp - gm) / (2.0 * h)
}

/// Solves `-L psi = f` with `int psi dmu = 0`.
pub fn solve_poisson<F>(f: F, degree: usize, measure: &InvariantMeasure) -> Result<SpectralSolution, PoissonError>
where
    F: Fn(f64) -> Result<f64, PoissonError>,
{
    solve_at(f, degree, measure, None)
}

fn solve_at<F>(f: F, degree: usize, measure: &InvariantMeasure, x: Option<f64>) -> Result<SpectralSolution, PoissonError>
where
    F: Fn(f64) -> Result<f64, PoissonError>,
{
    let c = project_normalized(f, degree, measure)?;
    if c[0].abs() > CENTERING_TOL {
        return Err(PoissonError::Centering {
            mean: c[0],
            tol: CENTERING_TOL,
        });
    }
    let total: f64 = c.iter().map(|v| v * v).sum();
    let tail_energy: f64 = c.iter().skip(degree / 2 + 1).map(|v| v * v).sum();
    let warning = (tail_energy > TAIL_TOL * (1.0 + total)).then(|| {
        format!("truncation degree {degree} may be too small: upper-half energy {tail_energy:e}")
    });
    let mut psi = vec![0.0; degree + 1];
    for n in 1..=degree {
        psi[n] = c[n] / n as f64;
    }
    Ok(SpectralSolution::from_normalized(psi, x, tail_energy, warning))
}

fn rhs_parts(averaged: &AveragedCoefficients, x: f64) -> Result<(f64, f64), PoissonError> {
    require_gaussian(averaged.measure())?;
    let row = averaged.row(x)?;
    Ok((row.bar, row.fluct * row.fluct))
}

/// `psi_1(x, .)` solving `-L psi_1 = sigma(x, .) - sigma_bar(x)`.
pub fn build_psi1(
    sigma: &CoefficientFn,
    averaged: &AveragedCoefficients,
    x: f64,
    degree: usize,
) -> Result<SpectralSolution, PoissonError> {
    let (bar, _) = rhs_parts(averaged, x)?;
    solve_at(|m| Ok(sigma.eval(x, m)? - bar), degree, averaged.measure(), Some(x))
}

/// `psi_2(x, .)` solving `-L psi_2 = (sigma(x, .) - sigma_bar(x))^2 - <sigma>(x)^2`.
pub fn build_psi2(
    sigma: &CoefficientFn,
    averaged: &AveragedCoefficients,
    x: f64,
    degree: usize,
) -> Result<SpectralSolution, PoissonError> {
    let (bar, var) = rhs_parts(averaged, x)?;
    solve_at(
        |m| {
            let d = sigma.eval(x, m)? - bar;
            Ok(d * d - var)
        },
        degree,
        averaged.measure(),
        Some(x),
    )
}

/// Single-equation variant `-L psi = sigma^2 - Sigma^2`, for cross-checks.
pub fn build_psi_single(
    sigma: &CoefficientFn,
    averaged: &AveragedCoefficients,
    x: f64,
    degree: usize,
) -> Result<SpectralSolution, PoissonError> {
    require_gaussian(averaged.measure())?;
    let big = averaged.row(x)?.big;
    solve_at(
        |m| {
            let s = sigma.eval(x, m)?;
            Ok(s * s - big * big)
        },
        degree,
        averaged.measure(),
        Some(x),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualReport {
    /// `max |-L psi(m) - f(m)|` over the node set.
    pub sup_residual: f64,
    /// `|int psi dmu|` by quadrature.
    pub centering: f64,
}

/// Quadrature nodes of `measure` inside `[-RESIDUAL_WINDOW, RESIDUAL_WINDOW]`.
pub fn residual_nodes(measure: &InvariantMeasure) -> Vec<f64> {
    measure
        .nodes()
        .iter()
        .copied()
        .filter(|m| m.abs() <= RESIDUAL_WINDOW)
        .collect()
}

pub fn residual_check<F>(
    psi: &SpectralSolution,
    f: F,
    nodes: &[f64],
    measure: &InvariantMeasure,
) -> Result<ResidualReport, PoissonError>
where
    F: Fn(f64) -> Result<f64, PoissonError>,
{
    let mut sup = 0.0f64;
    for &m in nodes {
        sup = sup.max((-psi.apply_generator(m) - f(m)?).abs());
    }
    let centering = measure.expect::<_, PoissonError>(|m| Ok(psi.eval(m)))?.abs();
    Ok(ResidualReport {
        sup_residual: sup,
        centering,
    })
}

/// Residuals of both Poisson equations at one `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonCheckRow {
    pub x: f64,
    pub residual1: f64,
    pub residual2: f64,
    pub centering1: f64,
    pub centering2: f64,
}

pub fn check_at(
    sigma: &CoefficientFn,
    averaged: &AveragedCoefficients,
    x: f64,
    degree: usize,
) -> Result<PoissonCheckRow, PoissonError> {
    let measure = averaged.measure();
    let nodes = residual_nodes(measure);
    let (bar, var) = rhs_parts(averaged, x)?;
    let psi1 = build_psi1(sigma, averaged, x, degree)?;
    let psi2 = build_psi2(sigma, averaged, x, degree)?;
    let r1 = residual_check(&psi1, |m| Ok(sigma.eval(x, m)? - bar), &nodes, measure)?;
    let r2 = residual_check(
        &psi2,
        |m| {
            let d = sigma.eval(x, m)? - bar;
            Ok(d * d - var)
        },
        &nodes,
        measure,
    )?;
    Ok(PoissonCheckRow {
        x,
        residual1: r1.sup_residual,
        residual2: r2.sup_residual,
        centering1: r1.centering,
        centering2: r2.centering,
    })
}

/// `psi_1`, `psi_2` cached on an x-grid.
#[derive(Debug, Clone)]
pub struct PoissonTable {
    pub grid: Vec<f64>,
    pub psi1: Vec<SpectralSolution>,
    pub psi2: Vec<SpectralSolution>,
}

impl PoissonTable {
    pub fn build(
        sigma: &CoefficientFn,
        averaged: &AveragedCoefficients,
        grid: &[f64],
        degree: usize,
    ) -> Result<Self, PoissonError> {
        let mut psi1 = Vec::with_capacity(grid.len());
        let mut psi2 = Vec::with_capacity(grid.len());
        for &x in grid {
            psi1.push(build_psi1(sigma, averaged, x, degree)?);
            psi2.push(build_psi2(sigma, averaged, x, degree)?);
        }
        Ok(Self {
            grid: grid.to_vec(),
            psi1,
            psi2,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::averaging::unit_grid;

    fn gauss() -> InvariantMeasure {
        InvariantMeasure::standard_gaussian().unwrap()
    }

    fn averaged(s: &str) -> (CoefficientFn, AveragedCoefficients) {
        let s = CoefficientFn::periodic(s).unwrap();
        let a = AveragedCoefficients::new(s.clone(), gauss()).unwrap();
        (s, a)
    }

    #[test]
    fn orthogonality() {
        let mu = gauss();
        let n = 40;
        let basis = HermiteBasis::new(n);
        let mut gram = vec![vec![0.0; n + 1]; n + 1];
        for (&m, &w) in mu.nodes().iter().zip(mu.weights()) {
            let h = basis.eval_normalized(m);
            for i in 0..=n {
                for j in 0..=n {
                    gram[i][j] += w * h[i] * h[j];
                }
            }
        }
        // normalized Gram matrix is the identity, i.e. <He_i, He_j> = delta_ij i!
        for (i, row) in gram.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((g - target).abs() < 1e-9, "({i},{j})");
            }
        }
        let he = HermiteBasis::new(4).eval_all(2.0);
        assert_eq!(he, vec![1.0, 2.0, 3.0, 2.0, -5.0]);
    }

    #[test]
    fn eigenrelation_by_finite_differences() {
        let basis = HermiteBasis::new(6);
        for n in 0..=6 {
            for &m in &[-1.3, 0.0, 0.4, 2.2] {
                let g = |t: f64| basis.eval_all(t)[n];
                let lg = apply_generator_fd(g, m);
                let exact = -(n as f64) * g(m);
                assert!((lg - exact).abs() < 1e-5 * (1.0 + exact.abs()), "n={n} m={m}: {lg} vs {exact}");
            }
        }
    }

    #[test]
    fn projection_examples() {
        let mu = gauss();
        let f1 = project(Ok, 10, &mu).unwrap();
        assert!((f1[1] - 1.0).abs() < 1e-12);
        assert!(f1.iter().enumerate().all(|(n, v)| n == 1 || v.abs() <= 1e-12));
        let f2 = project(|m| Ok(m * m - 1.0), 10, &mu).unwrap();
        assert!((f2[2] - 1.0).abs() < 1e-12);
        assert!(f2.iter().enumerate().all(|(n, v)| n == 2 || v.abs() <= 1e-12));
        let fs = project(|m| Ok(m.sin()), 10, &mu).unwrap();
        assert!((fs[1] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((fs[1] - 0.60653).abs() < 1e-5);
        // E[sin(m) He_n]/n! = E[sin^(n)(m)]/n!: odd n only, alternating sign
        assert!((fs[3] + (-0.5f64).exp() / 6.0).abs() < 1e-12);
    }

    #[test]
    fn exact_basis_solutions() {
        let mu = gauss();
        let nodes = residual_nodes(&mu);
        let p1 = solve_poisson(Ok, DEFAULT_DEGREE, &mu).unwrap();
        assert!((p1.coefficients()[1] - 1.0).abs() < 1e-12);
        let r = residual_check(&p1, Ok, &nodes, &mu).unwrap();
        assert!(r.sup_residual <= 1e-10 && r.centering <= 1e-12, "{r:?}");
        let p2 = solve_poisson(|m| Ok(m * m - 1.0), DEFAULT_DEGREE, &mu).unwrap();
        assert!((p2.coefficients()[2] - 0.5).abs() < 1e-12);
        let r = residual_check(&p2, |m| Ok(m * m - 1.0), &nodes, &mu).unwrap();
        assert!(r.sup_residual <= 1e-10 && r.centering <= 1e-12, "{r:?}");
        // symbolic: psi = (m^2 - 1)/2, psi'' - m psi' = 1 - m^2
        for &m in &[-2.0, 0.5, 3.0] {
            assert!((p2.apply_generator(m) - (1.0 - m * m)).abs() < 1e-10);
            assert!((p2.eval(m) - (m * m - 1.0) / 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn sine_solution() {
        let mu = gauss();
        let psi = solve_poisson(|m| Ok(m.sin()), DEFAULT_DEGREE, &mu).unwrap();
        assert!((psi.coefficients()[1] - (-0.5f64).exp()).abs() < 1e-12);
        assert!(psi.coefficients()[0] == 0.0);
        assert!(psi.warning.is_none());
        let r = residual_check(&psi, |m| Ok(m.sin()), &residual_nodes(&mu), &mu).unwrap();
        assert!(r.sup_residual <= 1e-8 && r.centering <= 1e-12, "{r:?}");
        // callable generator agrees with the spectral one
        for &m in &[-1.0, 0.3, 2.0] {
            let fd = apply_generator_fd(|t| psi.eval(t), m);
            assert!((fd - psi.apply_generator(m)).abs() < 1e-5);
        }
    }

    #[test]
    fn generator_examples() {
        let he1 = SpectralSolution::from_coefficients(vec![0.0, 1.0]);
        let he2 = SpectralSolution::from_coefficients(vec![0.0, 0.0, 1.0]);
        let one = SpectralSolution::from_coefficients(vec![1.0]);
        for &m in &[-2.0, 0.0, 1.5] {
            assert!((he1.apply_generator(m) + m).abs() < 1e-14);
            assert!((he2.apply_generator(m) + 2.0 * (m * m - 1.0)).abs() < 1e-12);
            assert_eq!(one.apply_generator(m), 0.0);
            assert!(apply_generator_fd(|_| 3.0, m).abs() < 1e-9);
        }
    }

    #[test]
    fn centering_violation_is_reported() {
        match solve_poisson(|m| Ok(m * m), 10, &gauss()) {
            Err(PoissonError::Centering { mean, .. }) => assert!((mean - 1.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_warning() {
        // cos(3m) has slowly decaying coefficients relative to degree 6
        let mu = gauss();
        let c = (-4.5f64).exp();
        let psi = solve_poisson(|m| Ok((3.0 * m).cos() - c), 6, &mu).unwrap();
        assert!(psi.warning.is_some());
    }

    #[test]
    fn gibbs_measure_is_unsupported() {
        let v = CoefficientFn::parse("m*m*m*m/4").unwrap();
        let mu = InvariantMeasure::gibbs(&v).unwrap();
        assert!(matches!(solve_poisson(Ok, 10, &mu), Err(PoissonError::Unsupported)));
        let s = CoefficientFn::periodic("2+sin(m)").unwrap();
        let avg = AveragedCoefficients::new(s.clone(), mu).unwrap();
        assert!(matches!(build_psi1(&s, &avg, 0.0, 10), Err(PoissonError::Unsupported)));
    }

    #[test]
    fn psi_for_shipped_coefficients() {
        let (s, avg) = averaged("2+sin(m)");
        let p1 = build_psi1(&s, &avg, 0.2, DEFAULT_DEGREE).unwrap();
        assert!((p1.coefficients()[1] - (-0.5f64).exp()).abs() < 1e-12);
        let row = check_at(&s, &avg, 0.2, DEFAULT_DEGREE).unwrap();
        assert!(row.residual1 <= 1e-8 && row.residual2 <= 1e-8, "{row:?}");
        assert!(row.centering1 <= 1e-12 && row.centering2 <= 1e-12);

        let (s, avg) = averaged("m");
        let p2 = build_psi2(&s, &avg, 0.0, DEFAULT_DEGREE).unwrap();
        assert!((p2.coefficients()[2] - 0.5).abs() < 1e-12);
        assert!(p2.coefficients().iter().enumerate().all(|(n, v)| n == 2 || v.abs() < 1e-12));

        let (s, avg) = averaged("1+0.5*sin(2*pi*x)");
        let a = build_psi1(&s, &avg, 0.1, DEFAULT_DEGREE).unwrap();
        let b = build_psi2(&s, &avg, 0.1, DEFAULT_DEGREE).unwrap();
        assert!(a.coefficients().iter().all(|v| v.abs() < 1e-12));
        assert!(b.coefficients().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn x_dependent_grid() {
        let (s, avg) = averaged("0.5+0.25*sin(2*pi*x)*cos(m)");
        let grid = unit_grid(16);
        let table = PoissonTable::build(&s, &avg, &grid, DEFAULT_DEGREE).unwrap();
        assert_eq!(table.psi1.len(), 16);
        for &x in &grid {
            let row = check_at(&s, &avg, x, DEFAULT_DEGREE).unwrap();
            assert!(row.residual1 <= 1e-8 && row.residual2 <= 1e-8);
        }
        // single-equation solution equals 2 sigma_bar psi_1 + psi_2 by linearity
        let x = 0.3;
        let bar = avg.row(x).unwrap().bar;
        let single = build_psi_single(&s, &avg, x, DEFAULT_DEGREE).unwrap();
        let p1 = build_psi1(&s, &avg, x, DEFAULT_DEGREE).unwrap();
        let p2 = build_psi2(&s, &avg, x, DEFAULT_DEGREE).unwrap();
        for n in 0..=DEFAULT_DEGREE {
            let combo = 2.0 * bar * p1.coefficients()[n] + p2.coefficients()[n];
            assert!((single.coefficients()[n] - combo).abs() < 1e-12);
        }
    }

    #[test]
    fn growth_surrogate_is_finite() {
        let (s, avg) = averaged("2+sin(m)");
        let c1 = build_psi1(&s, &avg, 0.0, DEFAULT_DEGREE).unwrap().growth_constant();
        let c2 = build_psi2(&s, &avg, 0.0, DEFAULT_DEGREE).unwrap().growth_constant();
        assert!(c1.is_finite() && c1 > 0.0 && c1 < 10.0);
        assert!(c2.is_finite() && c2 > 0.0 && c2 < 10.0);
    }
}
