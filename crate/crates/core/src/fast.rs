//! The fast process `m_eps(t) = m(t / eps)`, where `m` solves
//! `dm = -V'(m) dt + sqrt(2) dW`.
//!
//! The Ornstein-Uhlenbeck case `V(m) = m^2 / 2` is advanced with its exact
//! Gaussian transition. General potentials use Euler-Maruyama micro-steps
//! whose fast-time length never exceeds [`FAST_STEP_CEILING`].

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::averaging::{AveragingError, InvariantMeasure};
use crate::expr::{CoefficientFn, ExprError};

/// Largest admissible `delta_slow / eps` for one Euler-Maruyama micro-step.
pub const FAST_STEP_CEILING: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FastError {
    #[error("eps must lie in (0, 1), got {0}")]
    InvalidEpsilon(f64),
    #[error("fast-time step {ratio:e} exceeds the stability ceiling {ceiling:e}")]
    StepTooLarge { ratio: f64, ceiling: f64 },
    #[error("invalid time grid: horizon {horizon}, step {step}")]
    InvalidGrid { horizon: f64, step: f64 },
    #[error("fast process left the finite range: {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Averaging(#[from] AveragingError),
}

#[derive(Debug, Clone)]
pub enum FastKind {
    /// `V'(m) = m`; invariant law N(0, 1).
    OrnsteinUhlenbeck,
    /// General confining potential given by its derivative.
    Langevin {
        drift: CoefficientFn,
        measure: Box<InvariantMeasure>,
    },
}

#[derive(Debug, Clone)]
pub struct FastProcessSpec {
    kind: FastKind,
    m0: f64,
    eps: f64,
}

fn check_eps(eps: f64) -> Result<(), FastError> {
    if eps > 0.0 && eps < 1.0 {
        Ok(())
    } else {
        Err(FastError::InvalidEpsilon(eps))
    }
}

impl FastProcessSpec {
    pub fn ornstein_uhlenbeck(m0: f64, eps: f64) -> Result<Self, FastError> {
        check_eps(eps)?;
        Ok(Self {
            kind: FastKind::OrnsteinUhlenbeck,
            m0,
            eps,
        })
    }

    /// Langevin dynamics with drift `-V'(m)`; the invariant measure is
    /// tabulated once here for inverse-CDF sampling.
    pub fn langevin(drift: CoefficientFn, m0: f64, eps: f64) -> Result<Self, FastError> {
        check_eps(eps)?;
        let measure = InvariantMeasure::gibbs_from_drift(&drift)?;
        Ok(Self {
            kind: FastKind::Langevin {
                drift,
                measure: Box::new(measure),
            },
            m0,
            eps,
        })
    }

    /// Same dynamics at a different time-scale separation.
    pub fn with_eps(&self, eps: f64) -> Result<Self, FastError> {
        check_eps(eps)?;
        Ok(Self {
            eps,
            ..self.clone()
        })
    }

    pub fn with_m0(&self, m0: f64) -> Self {
        Self { m0, ..self.clone() }
    }

    pub fn kind(&self) -> &FastKind {
        &self.kind
    }

    pub fn m0(&self) -> f64 {
        self.m0
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn is_ou(&self) -> bool {
        matches!(self.kind, FastKind::OrnsteinUhlenbeck)
    }

    pub fn scheme(&self) -> &'static str {
        match self.kind {
            FastKind::OrnsteinUhlenbeck => "ou-exact",
            FastKind::Langevin { .. } => "langevin-em",
        }
    }
}

/// Exact Ornstein-Uhlenbeck transition over a slow-time step.
#[inline]
pub fn ou_exact_step(m: f64, delta_slow: f64, eps: f64, gaussian: f64) -> f64 {
    let r = delta_slow / eps;
    (-r).exp() * m + (-(-2.0 * r).exp_m1()).sqrt() * gaussian
}

/// One Euler-Maruyama step of the rescaled Langevin equation.
pub fn langevin_em_step(
    m: f64,
    delta_slow: f64,
    eps: f64,
    drift: &CoefficientFn,
    gaussian: f64,
) -> Result<f64, FastError> {
    let r = delta_slow / eps;
    if r > FAST_STEP_CEILING {
        return Err(FastError::StepTooLarge {
            ratio: r,
            ceiling: FAST_STEP_CEILING,
        });
    }
    Ok(m - r * drift.eval(0.0, m)? + (2.0 * r).sqrt() * gaussian)
}

/// A draw from the invariant measure.
pub fn sample_invariant<R: Rng + ?Sized>(spec: &FastProcessSpec, rng: &mut R) -> f64 {
    match &spec.kind {
        FastKind::OrnsteinUhlenbeck => rng.sample(StandardNormal),
        FastKind::Langevin { measure, .. } => measure
            .inverse_cdf(rng.random::<f64>())
            .expect("Gibbs measures carry a CDF table"),
    }
}

/// Advances the fast process by a fixed slow-time step, precomputing the
/// transition constants.
#[derive(Debug, Clone)]
pub struct FastStepper<'a> {
    spec: &'a FastProcessSpec,
    decay: f64,
    spread: f64,
    substeps: usize,
    micro: f64,
}

impl<'a> FastStepper<'a> {
    pub fn new(spec: &'a FastProcessSpec, delta_slow: f64) -> Self {
        let r = delta_slow / spec.eps;
        let substeps = ((r / FAST_STEP_CEILING).ceil() as usize).max(1);
        Self {
            spec,
            decay: (-r).exp(),
            spread: (-(-2.0 * r).exp_m1()).sqrt(),
            substeps,
            micro: delta_slow / substeps as f64,
        }
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    #[inline]
    pub fn advance<R: Rng + ?Sized>(&self, m: f64, rng: &mut R) -> Result<f64, FastError> {
        match &self.spec.kind {
            FastKind::OrnsteinUhlenbeck => {
                let xi: f64 = rng.sample(StandardNormal);
                Ok(self.decay * m + self.spread * xi)
            }
            FastKind::Langevin { drift, .. } => {
                let mut m = m;
                for _ in 0..self.substeps {
                    m = langevin_em_step(m, self.micro, self.spec.eps, drift, rng.sample(StandardNormal))?;
                }
                if m.is_finite() {
                    Ok(m)
                } else {
                    Err(FastError::NonFinite(m))
                }
            }
        }
    }
}

/// Number of steps and adjusted step so that the grid hits `horizon` exactly.
pub fn uniform_grid(horizon: f64, requested: f64) -> Result<(usize, f64), FastError> {
    if !(horizon >= 0.0 && horizon.is_finite() && requested > 0.0 && requested.is_finite()) {
        return Err(FastError::InvalidGrid {
            horizon,
            step: requested,
        });
    }
    if horizon == 0.0 {
        return Ok((0, requested));
    }
    // tolerate representation error in T / h before rounding up
    let n = ((horizon / requested) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    Ok((n, horizon / n as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastPath {
    pub step: f64,
    pub values: Vec<f64>,
    pub eps: f64,
    pub scheme: &'static str,
}

impl FastPath {
    pub fn time(&self, k: usize) -> f64 {
        self.step * k as f64
    }
}

/// Simulates `m_eps` on a uniform grid of `[0, horizon]` from `m0`.
pub fn simulate_fast_grid<R: Rng + ?Sized>(
    spec: &FastProcessSpec,
    horizon: f64,
    delta_slow: f64,
    rng: &mut R,
) -> Result<FastPath, FastError> {
    let (n, step) = uniform_grid(horizon, delta_slow)?;
    let stepper = FastStepper::new(spec, step);
    let mut values = Vec::with_capacity(n + 1);
    let mut m = spec.m0;
    values.push(m);
    for _ in 0..n {
        m = stepper.advance(m, rng)?;
        values.push(m);
    }
    Ok(FastPath {
        step,
        values,
        eps: spec.eps,
        scheme: spec.scheme(),
    })
}
