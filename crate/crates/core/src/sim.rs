//! Euler-Maruyama for the four slow systems:
//!
//! * original: `dX = sigma(X, m_eps) dB`
//! * coupled: `dY = sigma_bar(Y + Z) dB`, `dZ = (sigma - sigma_bar)(Y + Z, m_eps) dB`
//! * limit: `dY = sigma_bar(Y + Z) dB1`, `dZ = <sigma>(Y + Z) dB2`
//! * averaged: `dX = Sigma(X) dB`
//!
//! Coefficients are evaluated at the left end of each macro step. Every
//! replica draws from its own streams (see [`crate::rng`]), so the original
//! and coupled runs of one replica see the same Brownian increments and the
//! same fast path.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::averaging::AveragedCoefficients;
use crate::expr::{CoefficientFn, ExprError};
use crate::fast::{uniform_grid, FastError, FastProcessSpec, FastStepper};
use crate::rng::{stream, StreamRole};
use crate::stats::{self, StatsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("replica {replica}: non-finite state at step {step}")]
    NonFinite { replica: u64, step: usize },
    #[error("replica {replica}, step {step}: {source}")]
    Coefficient {
        replica: u64,
        step: usize,
        source: ExprError,
    },
    #[error("replica {replica}, step {step}: {source}")]
    Fast {
        replica: u64,
        step: usize,
        source: FastError,
    },
    #[error(transparent)]
    FastSetup(#[from] FastError),
    #[error("test function: {0}")]
    TestFunction(ExprError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub const DEFAULT_H_MAX: f64 = 1e-2;
pub const DEFAULT_COUPLING: f64 = 0.1;

/// Knobs of one experiment at a fixed `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub eps: f64,
    pub horizon: f64,
    pub x0: f64,
    pub m0: f64,
    pub h_max: f64,
    pub coupling: f64,
    pub n_samples: usize,
    pub base_seed: u64,
}

impl SimConfig {
    pub fn new(eps: f64, horizon: f64, x0: f64, m0: f64, n_samples: usize, base_seed: u64) -> Self {
        Self {
            eps,
            horizon,
            x0,
            m0,
            h_max: DEFAULT_H_MAX,
            coupling: DEFAULT_COUPLING,
            n_samples,
            base_seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidConfig(msg));
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return bad(format!("eps must lie in (0, 1), got {}", self.eps));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !self.x0.is_finite() || !self.m0.is_finite() {
            return bad("initial values must be finite".to_string());
        }
        if !(self.coupling > 0.0 && self.coupling <= 1.0) {
            return bad(format!("coupling constant must lie in (0, 1], got {}", self.coupling));
        }
        if self.h_max.is_nan() || self.h_max <= 0.0 {
            return bad(format!("h_max must be positive, got {}", self.h_max));
        }
        if self.macro_step() > self.horizon {
            return bad(format!(
                "macro step {} exceeds the horizon {}",
                self.macro_step(),
                self.horizon
            ));
        }
        if self.n_samples < 1 {
            return bad("n_samples must be at least 1".to_string());
        }
        Ok(())
    }

    /// Requested macro step `min(h_max, c eps)` before grid rounding.
    pub fn macro_step(&self) -> f64 {
        self.h_max.min(self.coupling * self.eps)
    }

    /// Number of steps and the rounded step that lands on the horizon.
    pub fn grid(&self) -> Result<(usize, f64), SimError> {
        Ok(uniform_grid(self.horizon, self.macro_step())?)
    }

    /// Same experiment with the macro step divided by `factor`.
    pub fn refined(&self, factor: usize) -> Self {
        let f = factor.max(1) as f64;
        Self {
            h_max: self.h_max / f,
            coupling: self.coupling / f,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Original,
    Coupled,
    Limit,
    Averaged,
}

impl Scheme {
    pub fn tag(self) -> &'static str {
        match self {
            Scheme::Original => "original",
            Scheme::Coupled => "coupled",
            Scheme::Limit => "limit",
            Scheme::Averaged => "averaged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Endpoints {
    /// `(Y(T), Z(T))` per replica.
    Pairs(Vec<(f64, f64)>),
    /// `X(T)` per replica.
    Scalars(Vec<f64>),
}

/// Terminal values of one Monte Carlo run, in replica order.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointSample {
    pub config: SimConfig,
    pub scheme: Scheme,
    pub step: f64,
    pub steps: usize,
    pub values: Endpoints,
}

impl EndpointSample {
    pub fn len(&self) -> usize {
        match &self.values {
            Endpoints::Pairs(p) => p.len(),
            Endpoints::Scalars(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pairs(&self) -> Option<&[(f64, f64)]> {
        match &self.values {
            Endpoints::Pairs(p) => Some(p),
            Endpoints::Scalars(_) => None,
        }
    }

    /// `X(T)`: the scalar values, or `Y + Z` for pair runs.
    pub fn slow_values(&self) -> Vec<f64> {
        match &self.values {
            Endpoints::Pairs(p) => p.iter().map(|(y, z)| y + z).collect(),
            Endpoints::Scalars(s) => s.clone(),
        }
    }

    pub fn first(&self) -> Vec<f64> {
        match &self.values {
            Endpoints::Pairs(p) => p.iter().map(|v| v.0).collect(),
            Endpoints::Scalars(s) => s.clone(),
        }
    }

    pub fn second(&self) -> Vec<f64> {
        match &self.values {
            Endpoints::Pairs(p) => p.iter().map(|v| v.1).collect(),
            Endpoints::Scalars(s) => vec![0.0; s.len()],
        }
    }
}

/// Runs `f` for every replica id in parallel; results keep replica order and
/// the reported error is the one with the smallest replica id.
fn run_replicas<T, F>(n: usize, f: F) -> Result<Vec<T>, SimError>
where
    T: Send,
    F: Fn(u64) -> Result<T, SimError> + Sync + Send,
{
    let results: Vec<Result<T, SimError>> = (0..n as u64).into_par_iter().map(f).collect();
    results.into_iter().collect()
}

#[inline]
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn eval_sigma(sigma: &CoefficientFn, x: f64, m: f64, replica: u64, step: usize) -> Result<f64, SimError> {
    sigma.eval(x, m).map_err(|source| SimError::Coefficient { replica, step, source })
}

fn check_finite(values: &[f64], replica: u64, step: usize) -> Result<(), SimError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SimError::NonFinite { replica, step })
    }
}

struct Prepared {
    steps: usize,
    step: f64,
    fast: FastProcessSpec,
}

fn prepare(config: &SimConfig, fast: Option<&FastProcessSpec>) -> Result<Prepared, SimError> {
    config.validate()?;
    let (steps, step) = config.grid()?;
    let fast = match fast {
        Some(f) => f.with_eps(config.eps)?.with_m0(config.m0),
        None => FastProcessSpec::ornstein_uhlenbeck(config.m0, config.eps)?,
    };
    Ok(Prepared { steps, step, fast })
}

fn coupled_replica(
    config: &SimConfig,
    prep: &Prepared,
    sigma: &CoefficientFn,
    averaged: &AveragedCoefficients,
    replica: u64,
    mut observe: impl FnMut(usize, f64, f64),
) -> Result<(f64, f64), SimError> {
    let mut beta = stream(config.base_seed, replica, StreamRole::SlowBrownian);
    let mut noise = stream(config.base_seed, replica, StreamRole::FastNoise);
    let stepper = FastStepper::new(&prep.fast, prep.step);
    let sq = prep.step.sqrt();
    let (mut y, mut z, mut m) = (0.0, config.x0, prep.fast.m0());
    observe(0, y, z);
    for k in 0..prep.steps {
        let x = y + z;
        let bar = averaged.bar(x);
        let s = eval_sigma(sigma, x, m, replica, k)?;
        let db = sq * normal(&mut beta);
        y += bar * db;
        z += (s - bar) * db;
        m = stepper
            .advance(m, &mut noise)
            .map_err(|source| SimError::Fast { replica, step: k, source })?;
        check_finite(&[y, z], replica, k + 1)?;
        observe(k + 1, y, z);
    }
    Ok((y, z))
}

fn original_replica(
    config: &SimConfig,
    prep: &Prepared,
    sigma: &CoefficientFn,
    replica: u64,
    mut observe: impl FnMut(usize, f64),
) -> Result<f64, SimError> {
    let mut beta = stream(config.base_seed, replica, StreamRole::SlowBrownian);
    let mut noise = stream(config.base_seed, replica, StreamRole::FastNoise);
    let stepper = FastStepper::new(&prep.fast, prep.step);
    let sq = prep.step.sqrt();
    let (mut x, mut m) = (config.x0, prep.fast.m0());
    observe(0, x);
    for k in 0..prep.steps {
        let s = eval_sigma(sigma, x, m, replica, k)?;
        x += s * sq * normal(&mut beta);
        m = stepper
            .advance(m, &mut noise)
            .map_err(|source| SimError::Fast { replica, step: k, source })?;
        check_finite(&[x], replica, k + 1)?;
        observe(k + 1, x);
    }
    Ok(x)
}

/// `(Y_eps(T), Z_eps(T))` from `Y(0) = 0`, `Z(0) = x0`, both lines driven by
/// the same Brownian increment.
pub fn simulate_coupled(
    config: &SimConfig,
    sigma: &CoefficientFn,
    averaged: &AveragedCoefficients,
    fast: &FastProcessSpec,
) -> Result<EndpointSample, SimError> {
    let prep = prepare(config, Some(fast))?;
    let pairs = run_replicas(config.n_samples, |r| {
        coupled_replica(config, &prep, sigma, averaged, r, |_, _, _| {})
    })?;
    Ok(EndpointSample {
        config: config.clone(),
        scheme: Scheme::Coupled,
        step: prep.step,
        steps: prep.steps,
        values: Endpoints::Pairs(pairs),
    })
}

/// `X_eps(T)` for the original equation.
pub fn simulate_original(
    config: &SimConfig,
    sigma: &CoefficientFn,
    fast: &FastProcessSpec,
) -> Result<EndpointSample, SimError> {
    let prep = prepare(config, Some(fast))?;
    let xs = run_replicas(config.n_samples, |r| original_replica(config, &prep, sigma, r, |_, _| {}))?;
    Ok(EndpointSample {
        config: config.clone(),
        scheme: Scheme::Original,
        step: prep.step,
        steps: prep.steps,
        values: Endpoints::Scalars(xs),
    })
}

/// Full grid path `(Y_k, Z_k)` of one coupled replica.
pub fn trace_coupled(
    config: &SimConfig,
    sigma: &CoefficientFn,
    averaged: &AveragedCoefficients,
    fast: &FastProcessSpec,
    replica: u64,
) -> Result<Vec<(f64, f64)>, SimError> {
    let prep = prepare(config, Some(fast))?;
    let mut path = Vec::with_capacity(prep.steps + 1);
    coupled_replica(config, &prep, sigma, averaged, replica, |_, y, z| path.push((y, z)))?;
    Ok(path)
}

/// Full grid path `X_k` of one original replica (same streams as
/// [`trace_coupled`] for the same replica id).
pub fn trace_original(
    config: &SimConfig,
    sigma: &CoefficientFn,
    fast: &FastProcessSpec,
    replica: u64,
) -> Result<Vec<f64>, SimError> {
    let prep = prepare(config, Some(fast))?;
    let mut path = Vec::with_capacity(prep.steps + 1);
    original_replica(config, &prep, sigma, replica, |_, x| path.push(x))?;
    Ok(path)
}

fn limit_replica(
    config: &SimConfig,
    steps: usize,
    step: f64,
    averaged: &AveragedCoefficients,
    replica: u64,
    mut observe: impl FnMut(usize, f64, f64, f64, f64),
) -> Result<(f64, f64), SimError> {
    let mut b1 = stream(config.base_seed, replica, StreamRole::SlowBrownian);
    let mut b2 = stream(config.base_seed, replica, StreamRole::SecondBrownian);
    let sq = step.sqrt();
    let (mut y, mut z) = (0.0, config.x0);
    for k in 0..steps {
        let x = y + z;
        let dy = averaged.bar(x) * sq * normal(&mut b1);
        let dz = averaged.fluct(x) * sq * normal(&mut b2);
        y += dy;
        z += dz;
        check_finite(&[y, z], replica, k + 1)?;
        observe(k + 1, y, z, dy, dz);
    }
    Ok((y, z))
}

/// `(Y(T), Z(T))` of the limit system with independent drivers.
pub fn simulate_limit(config: &SimConfig, averaged: &AveragedCoefficients) -> Result<EndpointSample, SimError> {
    config.validate()?;
    let (steps, step) = config.grid()?;
    let pairs = run_replicas(config.n_samples, |r| {
        limit_replica(config, steps, step, averaged, r, |_, _, _, _, _| {})
    })?;
    Ok(EndpointSample {
        config: config.clone(),
        scheme: Scheme::Limit,
        step,
        steps,
        values: Endpoints::Pairs(pairs),
    })
}

/// Increments `(dY_k, dZ_k)` along one limit path.
pub fn trace_limit_increments(
    config: &SimConfig,
    averaged: &AveragedCoefficients,
    replica: u64,
) -> Result<Vec<(f64, f64)>, SimError> {
    config.validate()?;
    let (steps, step) = config.grid()?;
    let mut out = Vec::with_capacity(steps);
    limit_replica(config, steps, step, averaged, replica, |_, _, _, dy, dz| out.push((dy, dz)))?;
    Ok(out)
}

/// `X_bar(T)` of the averaged equation with diffusion `Sigma`.
pub fn simulate_averaged(config: &SimConfig, averaged: &AveragedCoefficients) -> Result<EndpointSample, SimError> {
    config.validate()?;
    let (steps, step) = config.grid()?;
    let sq = step.sqrt();
    let xs = run_replicas(config.n_samples, |r| {
        let mut beta = stream(config.base_seed, r, StreamRole::SlowBrownian);
        let mut x = config.x0;
        for k in 0..steps {
            x += averaged.big(x) * sq * normal(&mut beta);
            check_finite(&[x], r, k + 1)?;
        }
        Ok(x)
    })?;
    Ok(EndpointSample {
        config: config.clone(),
        scheme: Scheme::Averaged,
        step,
        steps,
        values: Endpoints::Scalars(xs),
    })
}

/// Test function `phi(y, z)`: an expression whose `x` slot reads `y` and
/// whose `m` slot reads `z`. Scalar samples are fed as `(X, 0)`.
#[derive(Debug, Clone)]
pub struct TestFunction(CoefficientFn);

impl TestFunction {
    pub fn parse(text: &str) -> Result<Self, ExprError> {
        CoefficientFn::parse(text).map(Self)
    }

    pub fn eval(&self, y: f64, z: f64) -> Result<f64, ExprError> {
        self.0.eval(y, z)
    }

    pub fn source(&self) -> &str {
        self.0.source()
    }
}

/// Monte Carlo mean of `phi` over the replicas with its CLT standard error.
pub fn weak_functional(samples: &EndpointSample, phi: &TestFunction) -> Result<(f64, f64), SimError> {
    let vals: Vec<f64> = match &samples.values {
        Endpoints::Pairs(p) => p.iter().map(|&(y, z)| phi.eval(y, z)).collect::<Result<_, _>>(),
        Endpoints::Scalars(s) => s.iter().map(|&x| phi.eval(x, 0.0)).collect::<Result<_, _>>(),
    }
    .map_err(SimError::TestFunction)?;
    Ok(stats::mean_and_stderr(&vals)?)
}
