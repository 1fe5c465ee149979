//! Invariant measures of the fast process and the averaged coefficients
//! `sigma_bar`, `<sigma>` and `Sigma` computed against them by quadrature.

use thiserror::Error;

use crate::expr::{CoefficientFn, ExprError, Var};
use crate::quadrature::{self, QuadratureError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AveragingError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("a Gibbs measure needs a potential")]
    MissingPotential,
    #[error("potential '{0}' must depend on m only")]
    PotentialDependsOnX(String),
    #[error("normalization of exp(-V) diverges on [-{truncation}, {truncation}]")]
    Divergent { truncation: f64 },
    #[error("exp(-V) is not negligible at the truncation bound: relative density {density:e} at m = {at}")]
    UnderResolved { at: f64, density: f64 },
    #[error("negative quadrature variance {value:e} at x = {x}")]
    NegativeVariance { x: f64, value: f64 },
}

pub const GAUSS_HERMITE_NODES: usize = 128;
pub const GIBBS_POINTS: usize = 2048;
pub const GIBBS_TRUNCATION: f64 = 12.0;
const TAIL_TOL: f64 = 1e-14;
/// Points of the memoized periodic x-table.
pub const MEMO_POINTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureKind {
    StandardGaussian,
    GibbsFromV,
}

/// A probability measure on the real line represented by a normalized
/// quadrature table.
#[derive(Debug, Clone)]
pub struct InvariantMeasure {
    kind: MeasureKind,
    potential: Option<String>,
    normalization: f64,
    truncation: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    // Trapezoid CDF at the nodes, used for inverse-CDF sampling.
    cdf: Vec<f64>,
}

impl InvariantMeasure {
    pub fn standard_gaussian() -> Result<Self, AveragingError> {
        Self::standard_gaussian_with_nodes(GAUSS_HERMITE_NODES)
    }

    pub fn standard_gaussian_with_nodes(n: usize) -> Result<Self, AveragingError> {
        let (nodes, weights) = quadrature::gauss_hermite_standard_normal(n)?;
        Ok(Self {
            kind: MeasureKind::StandardGaussian,
            potential: None,
            normalization: (2.0 * std::f64::consts::PI).sqrt(),
            truncation: f64::INFINITY,
            nodes,
            weights,
            cdf: Vec::new(),
        })
    }

    /// `dmu = exp(-V) dm / Z` with `V` given as an expression in `m`.
    pub fn gibbs(potential: &CoefficientFn) -> Result<Self, AveragingError> {
        Self::gibbs_with(potential, GIBBS_POINTS, GIBBS_TRUNCATION)
    }

    pub fn gibbs_with(
        potential: &CoefficientFn,
        points: usize,
        truncation: f64,
    ) -> Result<Self, AveragingError> {
        check_m_only(potential)?;
        let (nodes, _) = quadrature::trapezoid(-truncation, truncation, points);
        let v = nodes
            .iter()
            .map(|&m| potential.eval(0.0, m))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_potential_values(nodes, v, truncation, potential.source().to_string())
    }

    /// Gibbs measure from the drift `V'`; `V` is recovered by integrating
    /// `V'` between grid points (four-point Gauss-Legendre per cell) with
    /// the convention `V(0) = 0`.
    pub fn gibbs_from_drift(drift: &CoefficientFn) -> Result<Self, AveragingError> {
        Self::gibbs_from_drift_with(drift, GIBBS_POINTS, GIBBS_TRUNCATION)
    }

    pub fn gibbs_from_drift_with(
        drift: &CoefficientFn,
        points: usize,
        truncation: f64,
    ) -> Result<Self, AveragingError> {
        check_m_only(drift)?;
        let (nodes, _) = quadrature::trapezoid(-truncation, truncation, points);
        let cell = |a: f64, b: f64| quadrature::gauss_legendre4(a, b, |m| drift.eval(0.0, m));
        let mut v = vec![0.0; nodes.len()];
        for i in 1..nodes.len() {
            v[i] = v[i - 1] + cell(nodes[i - 1], nodes[i])?;
        }
        let below = nodes.partition_point(|&m| m <= 0.0).saturating_sub(1);
        let v0 = v[below] + cell(nodes[below], 0.0)?;
        v.iter_mut().for_each(|e| *e -= v0);
        Self::from_potential_values(nodes, v, truncation, format!("integral of {}", drift.source()))
    }

    fn from_potential_values(
        nodes: Vec<f64>,
        v: Vec<f64>,
        truncation: f64,
        label: String,
    ) -> Result<Self, AveragingError> {
        let n = nodes.len();
        let vmin = v.iter().copied().fold(f64::INFINITY, f64::min);
        if !vmin.is_finite() {
            return Err(AveragingError::Divergent { truncation });
        }
        let density: Vec<f64> = v.iter().map(|&e| (-(e - vmin)).exp()).collect();
        for &i in &[0, n - 1] {
            if density[i] > TAIL_TOL {
                return Err(AveragingError::UnderResolved {
                    at: nodes[i],
                    density: density[i],
                });
            }
        }
        let h = nodes[1] - nodes[0];
        let mut weights: Vec<f64> = density.iter().map(|d| d * h).collect();
        weights[0] *= 0.5;
        weights[n - 1] *= 0.5;
        let mass: f64 = weights.iter().sum();
        let normalization = mass * (-vmin).exp();
        if !normalization.is_finite() || normalization <= 0.0 {
            return Err(AveragingError::Divergent { truncation });
        }
        weights.iter_mut().for_each(|w| *w /= mass);
        let mut cdf = vec![0.0; n];
        for i in 1..n {
            cdf[i] = cdf[i - 1] + 0.5 * h * (density[i - 1] + density[i]);
        }
        let top = cdf[n - 1];
        cdf.iter_mut().for_each(|c| *c /= top);
        Ok(Self {
            kind: MeasureKind::GibbsFromV,
            potential: Some(label),
            normalization,
            truncation,
            nodes,
            weights,
            cdf,
        })
    }

    pub fn kind(&self) -> MeasureKind {
        self.kind
    }

    pub fn potential(&self) -> Option<&str> {
        self.potential.as_deref()
    }

    /// `Z = int exp(-V)`; `sqrt(2 pi)` for the standard Gaussian.
    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `int f dmu` by quadrature.
    pub fn expect<F, E>(&self, mut f: F) -> Result<f64, E>
    where
        F: FnMut(f64) -> Result<f64, E>,
    {
        let mut s = 0.0;
        for (&m, &w) in self.nodes.iter().zip(&self.weights) {
            s += w * f(m)?;
        }
        Ok(s)
    }

    /// Inverse CDF by monotone linear interpolation of the tabulated CDF.
    /// Only available for Gibbs measures; the Gaussian case is sampled exactly.
    pub fn inverse_cdf(&self, u: f64) -> Option<f64> {
        if self.cdf.is_empty() {
            return None;
        }
        let u = u.clamp(0.0, 1.0);
        let i = self.cdf.partition_point(|&c| c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        Some(self.nodes[i - 1] + t * (self.nodes[i] - self.nodes[i - 1]))
    }
}

fn check_m_only(f: &CoefficientFn) -> Result<(), AveragingError> {
    if f.depends_on(Var::X) {
        Err(AveragingError::PotentialDependsOnX(f.source().to_string()))
    } else {
        Ok(())
    }
}

/// Builds the measure of the given kind. `potential` is `V` itself.
pub fn build_measure(
    kind: MeasureKind,
    potential: Option<&CoefficientFn>,
) -> Result<InvariantMeasure, AveragingError> {
    match kind {
        MeasureKind::StandardGaussian => InvariantMeasure::standard_gaussian(),
        MeasureKind::GibbsFromV => {
            InvariantMeasure::gibbs(potential.ok_or(AveragingError::MissingPotential)?)
        }
    }
}

fn sqrt_variance(x: f64, value: f64) -> Result<f64, AveragingError> {
    if value < -1e-14 {
        Err(AveragingError::NegativeVariance { x, value })
    } else {
        Ok(value.max(0.0).sqrt())
    }
}

/// `sigma_bar(x) = int sigma(x, m) dmu(m)`.
pub fn sigma_bar(
    sigma: &CoefficientFn,
    measure: &InvariantMeasure,
    x: f64,
) -> Result<f64, AveragingError> {
    Ok(measure.expect(|m| sigma.eval(x, m))?)
}

/// `<sigma>(x)`, the standard deviation of `sigma(x, .)` under `mu`,
/// computed in two passes.
pub fn sigma_fluct(
    sigma: &CoefficientFn,
    measure: &InvariantMeasure,
    x: f64,
) -> Result<f64, AveragingError> {
    let bar = sigma_bar(sigma, measure, x)?;
    let var = measure.expect(|m| sigma.eval(x, m).map(|s| (s - bar) * (s - bar)))?;
    sqrt_variance(x, var)
}

/// `Sigma(x) = sqrt(int sigma(x, m)^2 dmu(m))`.
pub fn sigma_big(
    sigma: &CoefficientFn,
    measure: &InvariantMeasure,
    x: f64,
) -> Result<f64, AveragingError> {
    let second = measure.expect(|m| sigma.eval(x, m).map(|s| s * s))?;
    sqrt_variance(x, second)
}

/// Max over `x_grid` of `|sigma_bar^2 + <sigma>^2 - Sigma^2|`.
pub fn identity_residual(
    sigma: &CoefficientFn,
    measure: &InvariantMeasure,
    x_grid: &[f64],
) -> Result<f64, AveragingError> {
    let mut worst = 0.0f64;
    for &x in x_grid {
        let r = AveragedRow::compute(sigma, measure, x)?.residual;
        worst = worst.max(r);
    }
    Ok(worst)
}

/// One row of the averaged-coefficient table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragedRow {
    pub x: f64,
    pub bar: f64,
    pub fluct: f64,
    pub big: f64,
    pub residual: f64,
}

impl AveragedRow {
    pub fn compute(
        sigma: &CoefficientFn,
        measure: &InvariantMeasure,
        x: f64,
    ) -> Result<Self, AveragingError> {
        let bar = sigma_bar(sigma, measure, x)?;
        let fluct = sigma_fluct(sigma, measure, x)?;
        let big = sigma_big(sigma, measure, x)?;
        Ok(Self {
            x,
            bar,
            fluct,
            big,
            residual: (bar * bar + fluct * fluct - big * big).abs(),
        })
    }
}

/// Uniform grid `i / n` on `[0, 1)`.
pub fn unit_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / n as f64).collect()
}

#[derive(Debug, Clone)]
struct PeriodicTable {
    values: Vec<f64>,
}

impl PeriodicTable {
    /// Four-point Lagrange interpolation on the periodic grid.
    #[inline]
    fn at(&self, x: f64) -> f64 {
        let n = self.values.len();
        let s = x.rem_euclid(1.0) * n as f64;
        let j = s.floor();
        let t = s - j;
        let j = j as usize % n;
        let v = |k: isize| self.values[(j as isize + k).rem_euclid(n as isize) as usize];
        let wm1 = -t * (t - 1.0) * (t - 2.0) / 6.0;
        let w0 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
        let w1 = -(t + 1.0) * t * (t - 2.0) / 2.0;
        let w2 = (t + 1.0) * t * (t - 1.0) / 6.0;
        wm1 * v(-1) + w0 * v(0) + w1 * v(1) + w2 * v(2)
    }
}

#[derive(Debug, Clone)]
enum Tables {
    // sigma independent of x: the averages are plain numbers.
    Constant { bar: f64, fluct: f64, big: f64 },
    // sigma independent of m: sigma_bar is sigma itself, evaluated exactly.
    Frozen,
    Grid {
        bar: PeriodicTable,
        fluct: PeriodicTable,
        big: PeriodicTable,
    },
}

/// `sigma_bar`, `<sigma>` and `Sigma` for a fixed coefficient and measure,
/// memoized on a periodic x-grid for use inside time-stepping loops.
#[derive(Debug, Clone)]
pub struct AveragedCoefficients {
    sigma: CoefficientFn,
    measure: InvariantMeasure,
    tables: Tables,
    constant_in_m: bool,
}

impl AveragedCoefficients {
    pub fn new(sigma: CoefficientFn, measure: InvariantMeasure) -> Result<Self, AveragingError> {
        let constant_in_m = sigma.is_constant_in_m()?;
        let tables = if constant_in_m && sigma.depends_on(Var::X) {
            Tables::Frozen
        } else if sigma.depends_on(Var::X) {
            let mut bar = Vec::with_capacity(MEMO_POINTS);
            let mut fluct = Vec::with_capacity(MEMO_POINTS);
            let mut big = Vec::with_capacity(MEMO_POINTS);
            for x in unit_grid(MEMO_POINTS) {
                let row = AveragedRow::compute(&sigma, &measure, x)?;
                bar.push(row.bar);
                fluct.push(row.fluct);
                big.push(row.big);
            }
            Tables::Grid {
                bar: PeriodicTable { values: bar },
                fluct: PeriodicTable { values: fluct },
                big: PeriodicTable { values: big },
            }
        } else {
            let row = AveragedRow::compute(&sigma, &measure, 0.0)?;
            Tables::Constant {
                bar: row.bar,
                fluct: row.fluct,
                big: row.big,
            }
        };
        Ok(Self {
            sigma,
            measure,
            tables,
            constant_in_m,
        })
    }

    pub fn sigma(&self) -> &CoefficientFn {
        &self.sigma
    }

    pub fn measure(&self) -> &InvariantMeasure {
        &self.measure
    }

    /// `sigma(x, .)` does not vary with `m`: the fluctuation part vanishes
    /// and the non-degeneracy assumption on the coefficient fails.
    pub fn is_constant_in_m(&self) -> bool {
        self.constant_in_m
    }

    #[inline]
    pub fn bar(&self, x: f64) -> f64 {
        match &self.tables {
            Tables::Constant { bar, .. } => *bar,
            Tables::Frozen => self.frozen(x),
            Tables::Grid { bar, .. } => bar.at(x),
        }
    }

    #[inline]
    pub fn fluct(&self, x: f64) -> f64 {
        match &self.tables {
            Tables::Constant { fluct, .. } => *fluct,
            Tables::Frozen => 0.0,
            Tables::Grid { fluct, .. } => fluct.at(x).max(0.0),
        }
    }

    #[inline]
    pub fn big(&self, x: f64) -> f64 {
        match &self.tables {
            Tables::Constant { big, .. } => *big,
            Tables::Frozen => self.frozen(x).abs(),
            Tables::Grid { big, .. } => big.at(x),
        }
    }

    // NaN on failure; the time-stepping loops treat it as a numerical abort.
    fn frozen(&self, x: f64) -> f64 {
        self.sigma.eval(x, 0.0).unwrap_or(f64::NAN)
    }

    /// Direct quadrature, bypassing the memo table.
    pub fn row(&self, x: f64) -> Result<AveragedRow, AveragingError> {
        AveragedRow::compute(&self.sigma, &self.measure, x)
    }

    pub fn table(&self, grid: &[f64]) -> Result<Vec<AveragedRow>, AveragingError> {
        grid.iter().map(|&x| self.row(x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss() -> InvariantMeasure {
        InvariantMeasure::standard_gaussian().unwrap()
    }

    fn f(s: &str) -> CoefficientFn {
        CoefficientFn::parse(s).unwrap()
    }

    fn p(s: &str) -> CoefficientFn {
        CoefficientFn::periodic(s).unwrap()
    }

    #[test]
    fn gaussian_moments() {
        let mu = gauss();
        let moment = |k: i32| mu.expect::<_, ()>(|m| Ok(m.powi(k))).unwrap();
        assert!((moment(0) - 1.0).abs() < 1e-12);
        assert!(moment(1).abs() < 1e-12);
        assert!((moment(2) - 1.0).abs() < 1e-12);
        assert!(mu.weights().iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn gibbs_quadratic_matches_gaussian() {
        let mu = InvariantMeasure::gibbs(&f("m*m/2")).unwrap();
        let z = (2.0 * std::f64::consts::PI).sqrt();
        assert!((mu.normalization() - z).abs() < 1e-10);
        assert!((mu.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let g = gauss();
        for k in [2, 4, 6] {
            let a = mu.expect::<_, ()>(|m| Ok(m.powi(k))).unwrap();
            let b = g.expect::<_, ()>(|m| Ok(m.powi(k))).unwrap();
            assert!((a - b).abs() < 1e-10, "k={k}: {a} {b}");
        }
    }

    #[test]
    fn quartic_second_moment() {
        // Oracle: int m^2 e^{-m^4/4} / int e^{-m^4/4} = 2 Gamma(3/4) / Gamma(1/4).
        let exact = 2.0 * statrs::function::gamma::gamma(0.75) / statrs::function::gamma::gamma(0.25);
        let mu = InvariantMeasure::gibbs(&f("m*m*m*m/4")).unwrap();
        let got = mu.expect::<_, ()>(|m| Ok(m * m)).unwrap();
        assert!((got - exact).abs() < 1e-10, "{got} vs {exact}");
        assert!((got - 0.6760).abs() < 1e-4);
        // doubled resolution
        let fine = InvariantMeasure::gibbs_with(&f("m*m*m*m/4"), 4096, 12.0).unwrap();
        let got2 = fine.expect::<_, ()>(|m| Ok(m * m)).unwrap();
        assert!((got - got2).abs() < 1e-12);
    }

    #[test]
    fn drift_route_matches_potential_route() {
        let a = InvariantMeasure::gibbs(&f("m*m*m*m/4")).unwrap();
        let b = InvariantMeasure::gibbs_from_drift(&f("m*m*m")).unwrap();
        assert!((a.normalization() - b.normalization()).abs() < 1e-10);
        for (wa, wb) in a.weights().iter().zip(b.weights()) {
            assert!((wa - wb).abs() < 1e-12);
        }
    }

    #[test]
    fn gibbs_failures() {
        assert!(matches!(
            InvariantMeasure::gibbs(&f("0.01*m*m")),
            Err(AveragingError::UnderResolved { .. })
        ));
        assert!(matches!(
            InvariantMeasure::gibbs(&f("m*m+x")),
            Err(AveragingError::PotentialDependsOnX(_))
        ));
        assert!(matches!(
            build_measure(MeasureKind::GibbsFromV, None),
            Err(AveragingError::MissingPotential)
        ));
    }

    #[test]
    fn sine_coefficient_averages() {
        let mu = gauss();
        let s = p("2+sin(m)");
        let e2 = (-2f64).exp();
        assert!((sigma_bar(&s, &mu, 0.3).unwrap() - 2.0).abs() < 1e-12);
        let fl = sigma_fluct(&s, &mu, 0.3).unwrap();
        assert!((fl - ((1.0 - e2) / 2.0).sqrt()).abs() < 1e-12);
        assert!((fl - 0.65752).abs() < 1e-5);
        let big = sigma_big(&s, &mu, 0.3).unwrap();
        assert!((big - (4.0 + (1.0 - e2) / 2.0).sqrt()).abs() < 1e-12);
        assert!((big - 2.10531).abs() < 1e-5);
    }

    #[test]
    fn linear_and_constant_coefficients() {
        let mu = gauss();
        let s = p("m");
        assert!(sigma_bar(&s, &mu, 0.0).unwrap().abs() < 1e-12);
        assert!((sigma_fluct(&s, &mu, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((sigma_big(&s, &mu, 0.0).unwrap() - 1.0).abs() < 1e-12);
        let c = p("-1.5");
        assert!((sigma_bar(&c, &mu, 0.7).unwrap() + 1.5).abs() < 1e-12);
        assert_eq!(sigma_fluct(&c, &mu, 0.7).unwrap(), 0.0);
        assert!((sigma_big(&c, &mu, 0.7).unwrap() - 1.5).abs() < 1e-12);
        let avg = AveragedCoefficients::new(c, mu).unwrap();
        assert!(avg.is_constant_in_m());
    }

    #[test]
    fn identity_residuals() {
        let mu = gauss();
        let grid = unit_grid(64);
        assert!(identity_residual(&p("2+sin(m)"), &mu, &grid).unwrap() <= 1e-12);
        let xdep = p("0.5+0.25*sin(2*pi*x)*cos(m)");
        assert!(identity_residual(&xdep, &mu, &grid).unwrap() <= 1e-10);
        let quartic = InvariantMeasure::gibbs(&f("m*m*m*m/4")).unwrap();
        assert!(identity_residual(&xdep, &quartic, &grid).unwrap() <= 1e-10);
    }

    #[test]
    fn ordering_and_positivity_on_grid() {
        let mu = gauss();
        for s in ["2+sin(m)", "0.5+0.25*sin(2*pi*x)*cos(m)", "m", "cos(2*pi*x)*tanh(m)+0.1*m"] {
            let avg = AveragedCoefficients::new(p(s), mu.clone()).unwrap();
            assert!(!avg.is_constant_in_m());
            for row in avg.table(&unit_grid(64)).unwrap() {
                // sin(2 pi x) vanishes at x = 0 and 1/2, freezing the second one there
                let frozen = s.contains("sin(2*pi*x)") && (2.0 * row.x).fract() == 0.0;
                assert!(row.fluct >= 0.0 && (frozen || row.fluct > 0.0), "{s} at {}", row.x);
                assert!(row.big >= row.bar && row.bar >= -row.big);
                assert!((row.big * row.big - row.bar * row.bar - row.fluct * row.fluct).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn doubling_nodes_is_converged() {
        let coarse = gauss();
        let fine = InvariantMeasure::standard_gaussian_with_nodes(256).unwrap();
        for s in ["2+sin(m)", "0.5+0.25*sin(2*pi*x)*cos(m)"] {
            let s = p(s);
            for x in unit_grid(16) {
                let a = AveragedRow::compute(&s, &coarse, x).unwrap();
                let b = AveragedRow::compute(&s, &fine, x).unwrap();
                assert!((a.bar - b.bar).abs() < 1e-10);
                assert!((a.fluct - b.fluct).abs() < 1e-10);
                assert!((a.big - b.big).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn memo_table_tracks_direct_quadrature() {
        let avg = AveragedCoefficients::new(p("0.5+0.25*sin(2*pi*x)*cos(m)"), gauss()).unwrap();
        for i in 0..97 {
            let x = -1.3 + i as f64 * 0.037;
            let row = avg.row(x).unwrap();
            assert!((avg.bar(x) - row.bar).abs() < 1e-7);
            assert!((avg.fluct(x) - row.fluct).abs() < 1e-7);
            assert!((avg.big(x) - row.big).abs() < 1e-7);
        }
    }

    #[test]
    fn inverse_cdf_is_monotone() {
        let mu = InvariantMeasure::gibbs(&f("m*m/2")).unwrap();
        let q: Vec<f64> = (1..100).map(|i| mu.inverse_cdf(i as f64 / 100.0).unwrap()).collect();
        assert!(q.windows(2).all(|w| w[0] < w[1]));
        assert!(mu.inverse_cdf(0.5).unwrap().abs() < 1e-6);
        assert!(gauss().inverse_cdf(0.5).is_none());
    }
}
