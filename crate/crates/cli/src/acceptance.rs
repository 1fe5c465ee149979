//! The nine acceptance criteria, run end to end at fixed seeds.
//!
//! Reference values are computed here from closed forms (Gaussian laws of
//! the constant-coefficient case) rather than taken from the library, except
//! where the criterion itself names a library oracle.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use refavg_core::averaging::{identity_residual, unit_grid};
use refavg_core::poisson::{self, residual_check, residual_nodes, solve_poisson};
use refavg_core::sim::{self, EndpointSample};
use refavg_core::stats::{self, sample_cov, variance_with_stderr, EmpiricalSample};
use refavg_core::{AveragedCoefficients, CoefficientFn, FastProcessSpec, InvariantMeasure, PoissonError, SimConfig};

use crate::commands::{metric_table, Metric, REFERENCE_REFINEMENT, REFERENCE_SEED_OFFSET};
use crate::config::hex_digest;
use crate::output::{self, Provenance};
use crate::CliError;

pub const DEFAULT_SEED: u64 = 20_240_611;

/// Whole-suite wall-clock budget.
pub const SUITE_BUDGET: Duration = Duration::from_secs(600);

const SINE: &str = "2+sin(m)";
const X_DEPENDENT: &str = "0.5+0.25*sin(2*pi*x)*cos(m)";

/// Marginal variance of the fluctuation limit for `sigma = 2 + sin(m)`:
/// `<sigma>^2 T = Var(sin N(0, 1)) = (1 - e^{-2}) / 2` at `T = 1`.
fn fluct_variance() -> f64 {
    (1.0 - (-2.0f64).exp()) / 2.0
}

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: u8,
    pub title: &'static str,
    pub metrics: Vec<Metric>,
    pub elapsed: Duration,
    pub budget: Option<Duration>,
}

impl CriterionResult {
    pub fn numeric_pass(&self) -> bool {
        self.metrics.iter().all(|m| m.pass)
    }

    pub fn within_budget(&self) -> bool {
        self.budget.is_none_or(|b| self.elapsed <= b)
    }

    pub fn passed(&self) -> bool {
        self.numeric_pass() && self.within_budget()
    }

    /// One line: verdict, id, title, checked metrics and timing.
    pub fn line(&self) -> String {
        let checks: Vec<String> = self
            .metrics
            .iter()
            .map(|m| {
                if m.threshold.is_nan() {
                    format!("{}={:.4e}", m.name, m.value)
                } else {
                    format!(
                        "{}={:.4e} ({} {:.4e}{})",
                        m.name,
                        m.value,
                        m.relation(),
                        m.threshold,
                        if m.pass { "" } else { " FAIL" }
                    )
                }
            })
            .collect();
        let timing = match self.budget {
            Some(b) => format!(
                "{:.2} s, budget {} s{}",
                self.elapsed.as_secs_f64(),
                b.as_secs(),
                if self.within_budget() { "" } else { " EXCEEDED" }
            ),
            None => format!("{:.2} s", self.elapsed.as_secs_f64()),
        };
        format!(
            "AC{} {} {}: {} [{}]",
            self.id,
            if self.passed() { "PASS" } else { "FAIL" },
            self.title,
            checks.join("; "),
            timing
        )
    }
}

/// Criteria 1-8 of one run, with the text of every artifact they produced.
#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub criteria: Vec<CriterionResult>,
    /// `(file name, contents)` in a fixed order.
    pub artifacts: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct AcceptanceReport {
    pub seed: u64,
    pub criteria: Vec<CriterionResult>,
    pub elapsed: Duration,
}

impl AcceptanceReport {
    pub fn all_passed(&self) -> bool {
        self.criteria.iter().all(CriterionResult::passed)
    }

    pub fn summary_line(&self) -> String {
        let passed = self.criteria.iter().filter(|c| c.passed()).count();
        format!(
            "{passed}/{} criteria passed in {:.1} s (suite budget {} s)",
            self.criteria.len(),
            self.elapsed.as_secs_f64(),
            SUITE_BUDGET.as_secs()
        )
    }
}

fn gaussian() -> Result<InvariantMeasure, CliError> {
    Ok(InvariantMeasure::standard_gaussian()?)
}

fn setup(sigma: &str) -> Result<(CoefficientFn, AveragedCoefficients), CliError> {
    let s = CoefficientFn::periodic(sigma).map_err(|e| CliError::Numerical(e.to_string()))?;
    let avg = AveragedCoefficients::new(s.clone(), gaussian()?)?;
    Ok((s, avg))
}

fn ks_gaussian(values: Vec<f64>, variance: f64) -> Result<f64, CliError> {
    Ok(EmpiricalSample::new(values)?.ks_against_gaussian(0.0, variance)?)
}

fn within_se(name: impl Into<String>, value: f64, target: f64, se: f64) -> Metric {
    Metric::at_most(name, (value - target).abs(), 3.0 * se)
}

struct Timer(Instant);

impl Timer {
    fn start() -> Self {
        Timer(Instant::now())
    }

    fn finish(self, id: u8, title: &'static str, metrics: Vec<Metric>, budget: Option<u64>) -> CriterionResult {
        CriterionResult {
            id,
            title,
            metrics,
            elapsed: self.0.elapsed(),
            budget: budget.map(Duration::from_secs),
        }
    }
}

/// Coupled runs of the `2 + sin(m)` case, shared by criteria 3 to 5.
struct SineRuns {
    seed: u64,
    sigma: CoefficientFn,
    averaged: AveragedCoefficients,
    runs: BTreeMap<(u64, usize), EndpointSample>,
}

impl SineRuns {
    fn new(seed: u64) -> Result<Self, CliError> {
        let (sigma, averaged) = setup(SINE)?;
        Ok(Self {
            seed,
            sigma,
            averaged,
            runs: BTreeMap::new(),
        })
    }

    fn get(&mut self, eps: f64, n: usize) -> Result<&EndpointSample, CliError> {
        let key = (eps.to_bits(), n);
        if !self.runs.contains_key(&key) {
            let cfg = SimConfig::new(eps, 1.0, 0.0, 0.0, n, self.seed);
            let fast = FastProcessSpec::ornstein_uhlenbeck(0.0, eps)?;
            let sample = sim::simulate_coupled(&cfg, &self.sigma, &self.averaged, &fast)?;
            self.runs.insert(key, sample);
        }
        Ok(&self.runs[&key])
    }
}

pub fn averaging_identity() -> Result<CriterionResult, CliError> {
    let t = Timer::start();
    let grid = unit_grid(64);
    let mu = gaussian()?;
    let mut metrics = Vec::new();
    for s in [SINE, X_DEPENDENT] {
        let (sigma, _) = setup(s)?;
        let r = identity_residual(&sigma, &mu, &grid)?;
        metrics.push(Metric::at_most(format!("max_identity_residual[{s}]"), r, 1e-10));
    }
    Ok(t.finish(1, "averaging identity", metrics, Some(1)))
}

pub fn pathwise_decomposition(seed: u64) -> Result<CriterionResult, CliError> {
    let t = Timer::start();
    let mut metrics = Vec::new();
    for (s, x0) in [(SINE, 0.0), (X_DEPENDENT, 0.25)] {
        let (sigma, avg) = setup(s)?;
        let cfg = SimConfig::new(0.05, 1.0, x0, 0.0, 1000, seed);
        let fast = FastProcessSpec::ornstein_uhlenbeck(0.0, 0.05)?;
        let worst = (0..1000u64)
            .into_par_iter()
            .map(|r| -> Result<f64, CliError> {
                let yz = sim::trace_coupled(&cfg, &sigma, &avg, &fast, r)?;
                let x = sim::trace_original(&cfg, &sigma, &fast, r)?;
                Ok(yz
                    .iter()
                    .zip(&x)
                    .map(|(&(y, z), &x)| (x - (y + z)).abs())
                    .fold(0.0, f64::max))
            })
            .collect::<Result<Vec<f64>, CliError>>()?
            .into_iter()
            .fold(0.0, f64::max);
        metrics.push(Metric::at_most(format!("max_abs_X_minus_Y_plus_Z[{s}]"), worst, 1e-12));
    }
    Ok(t.finish(2, "pathwise decomposition", metrics, Some(10)))
}

fn average_marginal(runs: &mut SineRuns) -> Result<CriterionResult, CliError> {
    let t = Timer::start();
    let mut metrics = Vec::new();
    for eps in [0.2, 0.05] {
        let y = runs.get(eps, 100_000)?.first();
        let (var, se) = variance_with_stderr(&y)?;
        metrics.push(within_se(format!("abs_var_Y_minus_4[eps={eps}]"), var, 4.0, se));
        metrics.push(Metric::at_most(format!("ks_Y_vs_N(0,4)[eps={eps}]"), ks_gaussian(y, 4.0)?, 0.0087));
    }
    Ok(t.finish(3, "average marginal", metrics, None))
}

fn fluctuation_limit(runs: &mut SineRuns) -> Result<CriterionResult, CliError> {
    let t = Timer::start();
    let sample = runs.get(1e-3, 100_000)?;
    let q = sample_cov(sample.pairs().expect("coupled pairs"))?;
    let ks = ks_gaussian(sample.second(), fluct_variance())?;
    let metrics = vec![
        Metric::at_most("ks_Z_vs_limit[eps=0.001]", ks, 0.02),
        within_se("abs_Q12", q.q12, 0.0, q.se12),
        within_se("abs_Q22_minus_limit", q.q22, fluct_variance(), q.se22),
    ];
    Ok(t.finish(4, "fluctuation limit", metrics, None))
}

/// Sample size of the epsilon sweep in criterion 5.
pub const TREND_SAMPLES: usize = 100_000;

fn diffusion_enhancement(runs: &mut SineRuns) -> Result<CriterionResult, CliError> {
    let t = Timer::start();
    let total = 4.0 + fluct_variance();
    let x = runs.get(1e-3, 100_000)?.slow_values();
    let mut metrics = vec![Metric::at_most("ks_X_vs_N(0,Sigma^2)[eps=0.001]", ks_gaussian(x, total)?, 0.02)];
    let sweep = [0.2, 0.05, 0.0125];
    let mut ks = Vec::new();
    for eps in sweep {
        let x = runs.get(eps, TREND_SAMPLES)?.slow_values();
        let d = ks_gaussian(x, total)?;
        metrics.push(Metric::info(format!("ks_X[eps={eps}]"), d));
        ks.push(d);
    }
    for i in 1..sweep.len() {
        let drop = ks[i] - ks[i - 1];
        metrics.push(Metric::below(
            format!("ks_change[eps={}->{}]", sweep[i - 1], sweep[i]),
            drop,
            0.0,
        ));
    }
    Ok(t.finish(5, "diffusion enhancement", metrics, None))
}

pub fn weak_error_rate(seed: u64) -> Result<CriterionResult, CliError> {
    let t = Timer::start();
    let (m0, horizon, amplitude, offset) = (3.0, 1.0, 1.0, 2.0);
    let target = fluct_variance() * horizon;
    let eps = [0.2, 0.1, 0.05, 0.025];
    let mut errors = Vec::new();
    let mut metrics = Vec::new();
    for e in eps {
        let v = stats::gaussian_sine_moment_oracle(e, horizon, m0, amplitude, offset)?;
        errors.push((v - target).abs());
        metrics.push(Metric::info(format!("weak_error[eps={e}]"), (v - target).abs()));
    }
    let fit = stats::fit_rate(&eps, &errors)?;
    metrics.push(Metric::at_most("abs_slope_minus_1", (fit.slope - 1.0).abs(), 0.2));
    metrics.push(Metric::at_most("one_minus_r_squared", 1.0 - fit.r_squared, 0.02));
    metrics.push(Metric::info("slope", fit.slope));

    let (sigma, avg) = setup(SINE)?;
    let cfg = SimConfig::new(0.1, horizon, 0.0, m0, 100_000, seed);
    let fast = FastProcessSpec::ornstein_uhlenbeck(m0, 0.1)?;
    let sample = sim::simulate_coupled(&cfg, &sigma, &avg, &fast)?;
    let z2: Vec<f64> = sample.second().iter().map(|z| z * z).collect();
    let (mean, se) = stats::mean_and_stderr(&z2)?;
    let oracle = stats::gaussian_sine_moment_oracle(0.1, horizon, m0, amplitude, offset)?;
    metrics.push(within_se("abs_mc_minus_oracle[eps=0.1]", mean, oracle, se));
    Ok(t.finish(6, "weak-error rate", metrics, Some(120)))
}

pub fn poisson_solver() -> Result<CriterionResult, CliError> {
    let t = Timer::start();
    let mu = gaussian()?;
    let nodes = residual_nodes(&mu);
    let mut metrics = Vec::new();
    for s in [SINE, "m"] {
        let (sigma, avg) = setup(s)?;
        let row = poisson::check_at(&sigma, &avg, 0.0, 40)?;
        metrics.push(Metric::at_most(format!("residual_psi1[{s}]"), row.residual1, 1e-8));
        metrics.push(Metric::at_most(format!("residual_psi2[{s}]"), row.residual2, 1e-8));
        metrics.push(Metric::at_most(format!("centering_psi1[{s}]"), row.centering1, 1e-12));
        metrics.push(Metric::at_most(format!("centering_psi2[{s}]"), row.centering2, 1e-12));
    }
    type Rhs = fn(f64) -> Result<f64, PoissonError>;
    let cases: [(&str, Rhs); 2] = [("He1", |m| Ok(m)), ("He2", |m| Ok(m * m - 1.0))];
    for (name, f) in cases {
        let psi = solve_poisson(f, 40, &mu)?;
        let r = residual_check(&psi, f, &nodes, &mu)?;
        metrics.push(Metric::at_most(format!("residual[{name}]"), r.sup_residual, 1e-10));
    }
    Ok(t.finish(7, "Poisson solver", metrics, Some(5)))
}

pub fn generator_equality(seed: u64) -> Result<CriterionResult, CliError> {
    let t = Timer::start();
    let (sigma, avg) = setup(X_DEPENDENT)?;
    let eps = 1e-2;
    let cfg = SimConfig::new(eps, 1.0, 0.0, 0.0, 50_000, seed);
    let fast = FastProcessSpec::ornstein_uhlenbeck(0.0, eps)?;
    let coupled = sim::simulate_coupled(&cfg, &sigma, &avg, &fast)?;
    let mut ref_cfg = cfg.refined(REFERENCE_REFINEMENT);
    ref_cfg.base_seed = seed.wrapping_add(REFERENCE_SEED_OFFSET);
    let averaged = sim::simulate_averaged(&ref_cfg, &avg)?;
    let ks = EmpiricalSample::new(coupled.slow_values())?.ks_two_sample(&EmpiricalSample::new(averaged.slow_values())?);
    let metrics = vec![
        Metric::at_most("ks_X_eps_vs_X_bar", ks, 0.015),
        Metric::info("reference_steps", averaged.steps as f64),
    ];
    Ok(t.finish(8, "x-dependent generator equality", metrics, Some(180)))
}

fn suite_hash(seed: u64) -> String {
    hex_digest(format!("refavg acceptance suite\nseed={seed}\n").as_bytes())
}

fn artifact(seed: u64, c: &CriterionResult) -> (String, String) {
    let prov = Provenance {
        command: "acceptance".into(),
        config_hash: suite_hash(seed),
        seed,
    };
    (
        format!("acceptance-ac{}.csv", c.id),
        output::render_csv(&metric_table(&c.metrics), &prov),
    )
}

/// Criteria 1-8 once.
pub fn run_suite(seed: u64, progress: &mut dyn FnMut(&CriterionResult)) -> Result<SuiteRun, CliError> {
    let mut criteria = Vec::new();
    let mut push = |c: CriterionResult, criteria: &mut Vec<CriterionResult>| {
        progress(&c);
        criteria.push(c);
    };
    push(averaging_identity()?, &mut criteria);
    push(pathwise_decomposition(seed)?, &mut criteria);
    let mut runs = SineRuns::new(seed)?;
    push(average_marginal(&mut runs)?, &mut criteria);
    push(fluctuation_limit(&mut runs)?, &mut criteria);
    push(diffusion_enhancement(&mut runs)?, &mut criteria);
    drop(runs);
    push(weak_error_rate(seed)?, &mut criteria);
    push(poisson_solver()?, &mut criteria);
    push(generator_equality(seed)?, &mut criteria);
    let artifacts = criteria.iter().map(|c| artifact(seed, c)).collect();
    Ok(SuiteRun { criteria, artifacts })
}

/// Runs the suite, repeats it on a worker pool of a different size, and
/// compares the artifacts byte for byte (criterion 9). Artifacts of the
/// first run are written to `out_dir` when given.
pub fn run_acceptance(
    seed: u64,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&CriterionResult),
) -> Result<AcceptanceReport, CliError> {
    let started = Instant::now();
    let first = run_suite(seed, progress)?;

    let t = Timer::start();
    let threads = rayon::current_num_threads() + 1;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Numerical(format!("worker pool: {e}")))?;
    let second = pool.install(|| run_suite(seed, &mut |_| {}))?;
    let differing = first
        .artifacts
        .iter()
        .zip(&second.artifacts)
        .filter(|(a, b)| a.0 != b.0 || a.1.as_bytes() != b.1.as_bytes())
        .count()
        + first.artifacts.len().abs_diff(second.artifacts.len());
    let ac9 = t.finish(
        9,
        "reproducibility",
        vec![
            Metric::at_most("differing_artifacts", differing as f64, 0.0),
            Metric::info("artifacts_compared", first.artifacts.len() as f64),
            Metric::info("second_run_threads", threads as f64),
        ],
        None,
    );
    progress(&ac9);

    let mut criteria = first.criteria;
    if let Some(dir) = out_dir {
        output::ensure_dir(dir)?;
        let mut files = first.artifacts.clone();
        files.push(artifact(seed, &ac9));
        for (name, text) in &files {
            output::write_file(&dir.join(name), text.as_bytes())?;
        }
        let mut summary = crate::Table::new(&["criterion", "title", "pass"]);
        for c in criteria.iter().chain(std::iter::once(&ac9)) {
            summary.push(vec![(c.id as u64).into(), c.title.into(), c.numeric_pass().into()]);
        }
        let prov = Provenance {
            command: "acceptance".into(),
            config_hash: suite_hash(seed),
            seed,
        };
        output::write_file(
            &dir.join("acceptance-summary.csv"),
            output::render_csv(&summary, &prov).as_bytes(),
        )?;
    }
    criteria.push(ac9);
    Ok(AcceptanceReport {
        seed,
        criteria,
        elapsed: started.elapsed(),
    })
}
