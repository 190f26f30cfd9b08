//! Small-noise large deviations for multivariate stochastic volatility models.
//!
//! The crate computes rate functions of log-price processes whose volatility is driven by
//! Volterra-type processes (Gaussian, fractional, mixed, Volterra SDE and reflected
//! diffusions), turns them into asymptotics for calls, implied volatility, Asian options,
//! exit probabilities and barriers, and checks them against Monte Carlo simulation.

pub mod error;
pub mod func;
pub mod kernels;
pub mod mcsim;
pub mod model;
pub mod optim;
pub mod paths;
pub mod presets;
pub mod pricing;
pub mod quad;
pub mod ratefn;
pub mod toymodel;
pub mod volmap;

pub use error::{Error, Result};
