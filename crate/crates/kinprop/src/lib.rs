//! Numerical engine for probabilistic vehicle-trajectory forecasting.
//!
//! The crate propagates Gaussian uncertainty through four bicycle-model
//! kinematic formulations, validates every closed form against Monte-Carlo
//! and finite-difference oracles, and blends a small mixture-density
//! forecaster with a differentiable car-following simulator.
//!
//! Module map:
//!
//! * [`gaussian`] — scalar/planar Gaussians, mixtures, densities, NLL;
//! * [`propagation`] — formulations F1-F4, rollouts, trig error bounds;
//! * [`oracle`] — exact-sampling Monte-Carlo reference;
//! * [`autodiff`] — scalar reverse-mode tape;
//! * [`cfm`] — IDM simulator, parameter fitting, blend weight;
//! * [`forecast`] — synthetic scenes, model, training loop, metrics;
//! * [`validate`] — analytic-vs-oracle comparison harness;
//! * [`trajectory`] — scene containers and the line-delimited format.

pub mod autodiff;
pub mod cfm;
pub mod error;
pub mod forecast;
pub mod gaussian;
pub mod oracle;
pub mod propagation;
pub mod scalar;
pub mod seed;
pub mod trajectory;
pub mod validate;

pub use error::{Error, Result};
pub use scalar::Scalar;
