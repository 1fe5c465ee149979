//! Simulation and verification toolkit for one-dimensional SDEs whose
//! diffusion coefficient is modulated by a fast ergodic process.
//!
//! The slow component `X_eps` is split into an average part `Y_eps` driven by
//! `sigma_bar` and a fluctuation part `Z_eps` driven by `sigma - sigma_bar`.
//! As `eps -> 0` the pair converges in law to a system driven by two
//! independent Brownian motions with coefficients `sigma_bar` and `<sigma>`,
//! and `Y + Z` has the law of the averaged equation with
//! `Sigma^2 = sigma_bar^2 + <sigma>^2`.

pub mod averaging;
pub mod expr;
pub mod fast;
pub mod poisson;
pub mod quadrature;
pub mod rng;
pub mod sim;
pub mod stats;

pub use averaging::{AveragedCoefficients, InvariantMeasure, MeasureKind};
pub use expr::{CoefficientFn, ExprError, ExprNode};
pub use fast::{FastPath, FastProcessSpec};
pub use poisson::{SpectralSolution, PoissonError};
pub use sim::{EndpointSample, Endpoints, Scheme, SimConfig, SimError, TestFunction};
pub use stats::{Covariance2x2, EmpiricalSample, RateFit};
