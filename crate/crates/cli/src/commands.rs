//! The experiment subcommands. Each builds its tables from an
//! [`ExperimentConfig`] and writes them into the output directory.

use std::path::{Path, PathBuf};

use refavg_core::averaging::unit_grid;
use refavg_core::expr::Var;
use refavg_core::poisson::{self, DEFAULT_DEGREE};
use refavg_core::sim::{self, weak_functional};
use refavg_core::stats::{self, ks_critical_two_sample, sample_cov, EmpiricalSample};
use refavg_core::{AveragedCoefficients, CoefficientFn, EndpointSample, Endpoints, TestFunction};

use crate::config::ExperimentConfig;
use crate::output::{self, digest_bytes, Cache, Cell, Provenance, Table};
use crate::CliError;

/// Level of the KS comparisons in `compare`.
pub const KS_ALPHA: f64 = 1e-3;

/// Rows of the `avg-table` grid.
pub const AVG_TABLE_POINTS: usize = 64;

/// Limit and averaged references are simulated with the macro step divided
/// by this factor.
pub const REFERENCE_REFINEMENT: usize = 16;

/// Offset added to the base seed for reference runs, so they are
/// independent of the runs they are compared against.
pub const REFERENCE_SEED_OFFSET: u64 = 0x5eed;

/// What a subcommand produced.
#[derive(Debug, Default)]
pub struct Report {
    pub artifacts: Vec<PathBuf>,
    /// Human-readable summary for stdout.
    pub lines: Vec<String>,
    /// Some checked criterion failed (exit status 1).
    pub failed: bool,
}

pub struct Context {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
}

impl Context {
    fn provenance(&self, command: &str) -> Provenance {
        Provenance {
            command: command.to_string(),
            config_hash: self.config.hash(),
            seed: self.config.base_seed,
        }
    }

    fn write(&self, command: &str, stem: &str, table: &Table, report: &mut Report) -> Result<(), CliError> {
        let paths = output::write_table(
            &self.out_dir,
            stem,
            table,
            &self.provenance(command),
            &self.config.formats,
        )?;
        report.artifacts.extend(paths);
        Ok(())
    }

    fn write_cache(&self, stem: &str, columns: u32, values: Vec<f64>, report: &mut Report) -> Result<(), CliError> {
        let cache = Cache {
            config_hash: digest_bytes(&self.config.hash()).expect("sha256 hex"),
            columns,
            values,
        };
        let path = self.out_dir.join(format!("{stem}.bin"));
        output::write_file(&path, &cache.encode())?;
        report.artifacts.push(path);
        Ok(())
    }

    fn averaged(&self) -> Result<AveragedCoefficients, CliError> {
        Ok(AveragedCoefficients::new(
            self.config.sigma.clone(),
            self.config.measure()?,
        )?)
    }

    /// Fails early if the output directory cannot be created.
    pub fn prepare_output(&self) -> Result<(), CliError> {
        output::ensure_dir(&self.out_dir)?;
        Ok(())
    }
}

pub fn avg_table(ctx: &Context) -> Result<Report, CliError> {
    let avg = ctx.averaged()?;
    let mut table = Table::new(&["x", "sigma_bar", "sigma_fluct", "Sigma", "identity_residual"]);
    let mut worst = 0.0f64;
    for row in avg.table(&unit_grid(AVG_TABLE_POINTS))? {
        worst = worst.max(row.residual);
        table.push(vec![
            row.x.into(),
            row.bar.into(),
            row.fluct.into(),
            row.big.into(),
            row.residual.into(),
        ]);
    }
    let mut report = Report::default();
    ctx.write("avg-table", "avg-table", &table, &mut report)?;
    report.lines.push(format!(
        "{} rows, max identity residual {}",
        AVG_TABLE_POINTS,
        output::fmt_f64(worst)
    ));
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimulateScheme {
    Coupled,
    Original,
    Averaged,
}

fn endpoint_table(sample: &EndpointSample) -> (Table, u32, Vec<f64>) {
    match &sample.values {
        Endpoints::Pairs(pairs) => {
            let mut t = Table::new(&["replica_id", "Y", "Z"]);
            let mut flat = Vec::with_capacity(3 * pairs.len());
            for (i, &(y, z)) in pairs.iter().enumerate() {
                t.push(vec![i.into(), y.into(), z.into()]);
                flat.extend([i as f64, y, z]);
            }
            (t, 3, flat)
        }
        Endpoints::Scalars(xs) => {
            let mut t = Table::new(&["replica_id", "X"]);
            let mut flat = Vec::with_capacity(2 * xs.len());
            for (i, &x) in xs.iter().enumerate() {
                t.push(vec![i.into(), x.into()]);
                flat.extend([i as f64, x]);
            }
            (t, 2, flat)
        }
    }
}

fn emit_endpoints(
    ctx: &Context,
    command: &str,
    stem: &str,
    sample: &EndpointSample,
    cache: bool,
) -> Result<Report, CliError> {
    let (table, columns, flat) = endpoint_table(sample);
    let mut report = Report::default();
    ctx.write(command, stem, &table, &mut report)?;
    if cache {
        ctx.write_cache(stem, columns, flat, &mut report)?;
    }
    report.lines.push(format!(
        "{} replicas, {} steps of {}",
        sample.len(),
        sample.steps,
        output::fmt_f64(sample.step)
    ));
    Ok(report)
}

pub fn simulate(ctx: &Context, scheme: SimulateScheme, cache: bool) -> Result<Report, CliError> {
    let cfg = &ctx.config;
    let eps = cfg.epsilon();
    let sim_cfg = cfg.sim_config(eps);
    sim_cfg.validate()?;
    let fast = cfg.fast_spec(eps)?;
    let (sample, stem) = match scheme {
        SimulateScheme::Coupled => {
            let avg = ctx.averaged()?;
            (sim::simulate_coupled(&sim_cfg, &cfg.sigma, &avg, &fast)?, "simulate-coupled")
        }
        SimulateScheme::Original => (sim::simulate_original(&sim_cfg, &cfg.sigma, &fast)?, "simulate-original"),
        SimulateScheme::Averaged => {
            let avg = ctx.averaged()?;
            (sim::simulate_averaged(&sim_cfg, &avg)?, "simulate-averaged")
        }
    };
    emit_endpoints(ctx, "simulate", stem, &sample, cache)
}

pub fn limit(ctx: &Context, cache: bool) -> Result<Report, CliError> {
    let cfg = &ctx.config;
    let sim_cfg = cfg.sim_config(cfg.epsilon());
    sim_cfg.validate()?;
    let avg = ctx.averaged()?;
    let sample = sim::simulate_limit(&sim_cfg, &avg)?;
    emit_endpoints(ctx, "limit", "limit", &sample, cache)
}

/// One `(metric, value, threshold, pass)` row.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// The check is `value < threshold` rather than `value <= threshold`.
    pub strict: bool,
    pub pass: bool,
}

impl Metric {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            strict: false,
            pass: value <= threshold,
        }
    }

    pub fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            strict: true,
            pass: value < threshold,
        }
    }

    /// Reported only; never fails.
    pub fn info(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: f64::NAN,
            strict: false,
            pass: true,
        }
    }

    pub fn relation(&self) -> &'static str {
        match (self.threshold.is_nan(), self.strict) {
            (true, _) => "",
            (false, true) => "<",
            (false, false) => "<=",
        }
    }
}

pub fn metric_table(metrics: &[Metric]) -> Table {
    let mut t = Table::new(&["metric", "value", "relation", "threshold", "pass"]);
    for m in metrics {
        t.push(vec![
            m.name.clone().into(),
            m.value.into(),
            m.relation().into(),
            m.threshold.into(),
            m.pass.into(),
        ]);
    }
    t
}

/// Coupled endpoints at `eps` against the limit system simulated on the
/// refined grid with an independent seed.
pub fn compare_metrics(ctx: &Context) -> Result<Vec<Metric>, CliError> {
    let cfg = &ctx.config;
    let eps = cfg.epsilon();
    let sim_cfg = cfg.sim_config(eps);
    sim_cfg.validate()?;
    let avg = ctx.averaged()?;
    let coupled = sim::simulate_coupled(&sim_cfg, &cfg.sigma, &avg, &cfg.fast_spec(eps)?)?;
    let mut ref_cfg = sim_cfg.refined(REFERENCE_REFINEMENT);
    ref_cfg.base_seed = sim_cfg.base_seed.wrapping_add(REFERENCE_SEED_OFFSET);
    let limit = sim::simulate_limit(&ref_cfg, &avg)?;

    let n = coupled.len();
    let crit = ks_critical_two_sample(n, limit.len(), KS_ALPHA);
    let ks = |a: Vec<f64>, b: Vec<f64>| -> Result<f64, CliError> {
        Ok(EmpiricalSample::new(a)?.ks_two_sample(&EmpiricalSample::new(b)?))
    };
    let mut metrics = vec![
        Metric::at_most("ks_Y", ks(coupled.first(), limit.first())?, crit),
        Metric::at_most("ks_Z", ks(coupled.second(), limit.second())?, crit),
        Metric::at_most("ks_X", ks(coupled.slow_values(), limit.slow_values())?, crit),
    ];
    // eight projections tested at once: Bonferroni level
    let sliced_crit = ks_critical_two_sample(n, limit.len(), KS_ALPHA / 8.0);
    let (pa, pb) = (coupled.pairs().expect("pairs"), limit.pairs().expect("pairs"));
    metrics.push(Metric::at_most("sliced_ks", stats::sliced_ks(pa, pb)?, sliced_crit));
    let (qa, qb) = (sample_cov(pa)?, sample_cov(pb)?);
    for (name, a, sa, b, sb) in [
        ("abs_diff_Q11", qa.q11, qa.se11, qb.q11, qb.se11),
        ("abs_diff_Q12", qa.q12, qa.se12, qb.q12, qb.se12),
        ("abs_diff_Q22", qa.q22, qa.se22, qb.q22, qb.se22),
    ] {
        metrics.push(Metric::at_most(name, (a - b).abs(), 3.0 * sa.hypot(sb)));
    }
    let w1 = EmpiricalSample::new(coupled.slow_values())?.wasserstein1(&EmpiricalSample::new(limit.slow_values())?);
    metrics.push(Metric::info("wasserstein1_X", w1));
    Ok(metrics)
}

pub fn compare(ctx: &Context) -> Result<Report, CliError> {
    let metrics = compare_metrics(ctx)?;
    let mut report = Report::default();
    ctx.write("compare", "compare", &metric_table(&metrics), &mut report)?;
    for m in &metrics {
        report.lines.push(format!(
            "{:<16} {:>24} {:>2} {:>24} {}",
            m.name,
            output::fmt_f64(m.value),
            m.relation(),
            output::fmt_f64(m.threshold),
            if m.pass { "pass" } else { "FAIL" }
        ));
    }
    Ok(report)
}

/// `(offset, amplitude)` when `sigma(x, m) = offset + amplitude * sin(m)`
/// up to rounding, checked numerically.
pub fn sine_form(sigma: &CoefficientFn) -> Option<(f64, f64)> {
    if sigma.depends_on(Var::X) {
        return None;
    }
    let offset = sigma.eval(0.0, 0.0).ok()?;
    let amplitude = sigma.eval(0.0, std::f64::consts::FRAC_PI_2).ok()? - offset;
    let scale = 1.0 + offset.abs() + amplitude.abs();
    for k in -20..=20 {
        let m = 0.37 * k as f64;
        let v = sigma.eval(0.0, m).ok()?;
        if (v - offset - amplitude * m.sin()).abs() > 1e-12 * scale {
            return None;
        }
    }
    Some((offset, amplitude))
}

/// Whether `phi(y, z) = z^2` on a probe set.
pub fn is_z_squared(phi: &TestFunction) -> bool {
    let probes = [-2.5, -1.0, -0.3, 0.0, 0.7, 1.9];
    probes.iter().all(|&y| {
        probes.iter().all(|&z| match phi.eval(y, z) {
            Ok(v) => (v - z * z).abs() <= 1e-14 * (1.0 + z * z),
            Err(_) => false,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateMethod {
    /// Oracle when the case admits one, Monte Carlo otherwise.
    Auto,
    Oracle,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSweep {
    pub method: &'static str,
    pub epsilons: Vec<f64>,
    pub errors: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub fit: stats::RateFit,
}

pub fn rate_sweep_data(ctx: &Context, method: RateMethod) -> Result<RateSweep, CliError> {
    let cfg = &ctx.config;
    let oracle_case = match (cfg.is_ou(), sine_form(&cfg.sigma), is_z_squared(&cfg.phi)) {
        (true, Some(form), true) => Some(form),
        _ => None,
    };
    let use_oracle = match (method, oracle_case) {
        (RateMethod::MonteCarlo, _) => false,
        (_, Some(_)) => true,
        (RateMethod::Oracle, None) => {
            return Err(CliError::Usage(
                "the analytic oracle needs the Ornstein-Uhlenbeck fast process, \
                 sigma = a + b*sin(m) and phi = m*m"
                    .into(),
            ))
        }
        (RateMethod::Auto, None) => false,
    };
    let eps = cfg.epsilons.clone();
    let (errors, stderrs, tag) = if use_oracle {
        let (offset, amplitude) = oracle_case.expect("checked");
        let target = stats::sine_fluctuation_limit(cfg.horizon, amplitude);
        let mut errors = Vec::with_capacity(eps.len());
        for &e in &eps {
            let v = stats::gaussian_sine_moment_oracle(e, cfg.horizon, cfg.m0, amplitude, offset)?;
            errors.push((v - target).abs());
        }
        (errors, vec![0.0; eps.len()], "oracle")
    } else {
        let avg = ctx.averaged()?;
        let smallest = *eps.last().expect("non-empty epsilon list");
        let mut ref_cfg = cfg.sim_config(smallest).refined(REFERENCE_REFINEMENT);
        ref_cfg.base_seed = cfg.base_seed.wrapping_add(REFERENCE_SEED_OFFSET);
        let limit = sim::simulate_limit(&ref_cfg, &avg)?;
        let (lim_mean, lim_se) = weak_functional(&limit, &cfg.phi)?;
        let mut errors = Vec::with_capacity(eps.len());
        let mut ses = Vec::with_capacity(eps.len());
        for &e in &eps {
            let sim_cfg = cfg.sim_config(e);
            let sample = sim::simulate_coupled(&sim_cfg, &cfg.sigma, &avg, &cfg.fast_spec(e)?)?;
            let (mean, se) = weak_functional(&sample, &cfg.phi)?;
            errors.push((mean - lim_mean).abs());
            ses.push(se.hypot(lim_se));
        }
        (errors, ses, "monte-carlo")
    };
    let fit = stats::fit_rate_with_noise(&eps, &errors, if use_oracle { None } else { Some(&stderrs) })?;
    Ok(RateSweep {
        method: tag,
        epsilons: eps,
        errors,
        stderrs,
        fit,
    })
}

pub fn rate_sweep(ctx: &Context, method: RateMethod) -> Result<Report, CliError> {
    if ctx.config.epsilons.len() < 3 {
        return Err(CliError::Usage(
            "rate-sweep needs at least three values in [sim] epsilons".into(),
        ));
    }
    let sweep = rate_sweep_data(ctx, method)?;
    let mut points = Table::new(&["epsilon", "error", "stderr", "used"]);
    for (i, ((&e, &err), &se)) in sweep.epsilons.iter().zip(&sweep.errors).zip(&sweep.stderrs).enumerate() {
        points.push(vec![e.into(), err.into(), se.into(), sweep.fit.used.contains(&i).into()]);
    }
    let mut fit = Table::new(&["method", "slope", "intercept", "r_squared", "points_used"]);
    fit.push(vec![
        sweep.method.into(),
        sweep.fit.slope.into(),
        sweep.fit.intercept.into(),
        sweep.fit.r_squared.into(),
        sweep.fit.used.len().into(),
    ]);
    let mut report = Report::default();
    ctx.write("rate-sweep", "rate-sweep", &points, &mut report)?;
    ctx.write("rate-sweep", "rate-fit", &fit, &mut report)?;
    report.lines.push(format!(
        "{}: slope {} (R^2 {}) from {} of {} points",
        sweep.method,
        output::fmt_f64(sweep.fit.slope),
        output::fmt_f64(sweep.fit.r_squared),
        sweep.fit.used.len(),
        sweep.epsilons.len()
    ));
    Ok(report)
}

pub fn poisson_table(ctx: &Context, degree: usize) -> Result<(Table, Vec<String>), CliError> {
    let cfg = &ctx.config;
    let avg = ctx.averaged()?;
    // growth = max |psi(m)| / (1 + m^2) over m in [-8, 8]
    let mut table = Table::new(&[
        "x",
        "residual1",
        "residual2",
        "centering1",
        "centering2",
        "growth1",
        "growth2",
    ]);
    let mut warnings = Vec::new();
    for x in unit_grid(AVG_TABLE_POINTS) {
        let row = poisson::check_at(&cfg.sigma, &avg, x, degree)?;
        let psi1 = poisson::build_psi1(&cfg.sigma, &avg, x, degree)?;
        let psi2 = poisson::build_psi2(&cfg.sigma, &avg, x, degree)?;
        for (name, psi) in [("psi1", &psi1), ("psi2", &psi2)] {
            if let Some(w) = &psi.warning {
                warnings.push(format!("{name} at x = {x}: {w}"));
            }
        }
        table.push(vec![
            row.x.into(),
            row.residual1.into(),
            row.residual2.into(),
            row.centering1.into(),
            row.centering2.into(),
            psi1.growth_constant().into(),
            psi2.growth_constant().into(),
        ]);
    }
    Ok((table, warnings))
}

pub fn poisson_check(ctx: &Context, degree: Option<usize>) -> Result<Report, CliError> {
    let (table, warnings) = poisson_table(ctx, degree.unwrap_or(DEFAULT_DEGREE))?;
    let mut report = Report::default();
    ctx.write("poisson-check", "poisson-check", &table, &mut report)?;
    let col = |name: &str| table.column(name).expect("column");
    let max_of = |c: usize| {
        table
            .rows
            .iter()
            .map(|r| match r[c] {
                Cell::Float(v) => v,
                _ => f64::NAN,
            })
            .fold(0.0f64, f64::max)
    };
    report.lines.push(format!(
        "max residual {} / {}, max centering {} / {}",
        output::fmt_f64(max_of(col("residual1"))),
        output::fmt_f64(max_of(col("residual2"))),
        output::fmt_f64(max_of(col("centering1"))),
        output::fmt_f64(max_of(col("centering2"))),
    ));
    report.lines.extend(warnings.into_iter().map(|w| format!("warning: {w}")));
    Ok(report)
}

/// Output directory precedence: flag, then config file, then environment,
/// then the working directory.
pub fn resolve_out_dir(flag: Option<&Path>, config: Option<&ExperimentConfig>, env: Option<&str>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = config.and_then(|c| c.output_dir.clone()) {
        return p;
    }
    match env {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("."),
    }
}
