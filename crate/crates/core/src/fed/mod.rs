//! Federated orchestration: stage-one profiling, submodel deployment,
//! modular aggregation and expert recommendation.

pub mod aggregate;
pub mod client;
pub mod local;
pub mod recommend;
pub mod round;
pub mod sampling;
pub mod stage_one;

pub use aggregate::{modular_aggregate, EdgeUpdate};
pub use client::{initialize_plans, ClientState};
pub use recommend::{adjust_submodels, AdjustEvent, RecommendationConfig};
pub use round::{run_round, RoundSettings};
pub use sampling::{sample_round, RoundPlan, SamplingMode};
pub use stage_one::{stage_one, StageOneOutput};
