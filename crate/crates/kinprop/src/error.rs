//! Crate-wide error type.

use crate::cfm::IdmParams;

/// Errors raised by propagation, simulation, fitting and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate gaussian: sigma must be strictly positive, got {sigma}")]
    DegenerateGaussian { sigma: f64 },

    #[error("invalid correlation coefficient: |rho| must be < 1, got {rho}")]
    InvalidCorrelation { rho: f64 },

    #[error("mixture has no components")]
    EmptyMixture,

    #[error("mixture probabilities sum to {sum}, expected 1 within {tol}")]
    UnnormalizedMixture { sum: f64, tol: f64 },

    #[error("non-finite input to propagation")]
    NonFiniteInput,

    #[error("heading spread {sigma_theta} exceeds the linearization domain (pi/2)")]
    LinearizationDomain { sigma_theta: f64 },

    #[error("steering angle {mu_delta} outside the bicycle-model domain (|mu| < pi/2)")]
    SteeringDomain { mu_delta: f64 },

    #[error("control list has {got} entries, rollout horizon is {expected}")]
    ControlLengthMismatch { expected: usize, got: usize },

    #[error("controls or initial state do not match the rollout formulation")]
    FormulationMismatch,

    #[error("requested {requested} sample-steps, cap is {cap}")]
    ResourceLimit { requested: u64, cap: u64 },

    #[error("non-finite value produced during forward pass at tape node {node}")]
    NonFiniteForward { node: usize },

    #[error("collision state: non-positive gap {gap}")]
    CollisionState {
        follower: Option<u32>,
        leader: Option<u32>,
        gap: f64,
    },

    #[error("invalid history for parameter fitting: {reason}")]
    InvalidHistory { reason: String },

    #[error("parameter fit diverged after {iterations} iterations (best loss {loss})")]
    FitDiverged {
        best: IdmParams,
        loss: f64,
        iterations: usize,
    },

    #[error("zero-norm parameter vector in cosine similarity")]
    ZeroVector,

    #[error("blend weight {alpha} outside [0, 1]")]
    InvalidAlpha { alpha: f64 },

    #[error("scene generation failed: {reason}")]
    GenerationFailed { reason: String },

    #[error("bad record on line {line}: {reason}")]
    Format { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
