//! Desk-scale probabilistic trajectory forecaster: synthetic scene
//! generation, a feed-forward encoder with a mixture-density head (positions
//! or kinematic variables per formulation, plus car-following parameter
//! Gaussians), a deterministic training loop, and evaluation metrics.

mod metrics;
mod model;
mod synth;
mod train;

pub use metrics::{agent_predictions, evaluate, EvalReport, EVAL_SCHEMA};
pub use model::{
    agent_features, AgentFrame, ComponentOutput, GmmOutput, Model, ModelConfig, ParamLayout,
};
pub use synth::{synth_generate, IdmRanges, SynthConfig};
pub use train::{
    load_model, prepare_agents, save_model, train, training_step, PreparedAgent, TrainConfig,
    TrainResult, CHECKPOINT_SCHEMA,
};
