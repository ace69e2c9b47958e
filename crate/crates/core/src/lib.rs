//! Federated fine-tuning of personalised sub-MoE models.
//!
//! The crate simulates a two-stage federated protocol over a small
//! mixture-of-experts classifier:
//!
//! 1. clients report expert activation profiles (measured after a short
//!    adapter fine-tune, or predicted from same-task peers), and the server
//!    searches a memory-feasible expert subset per client;
//! 2. rounds of local training on those submodels, modular aggregation back
//!    into the global model, and similarity-driven expert recommendation.
//!
//! Baselines (random expert subsets, FedProx, FedAvg) share the same
//! machinery so results are directly comparable.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;
pub mod search;

pub use activation::ActivationProfile;
pub use data::{ClientDataset, FederationConfig, Sample};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, Method, Variant};
pub use model::{ModelConfig, MoeModel, TrainConfig};
pub use search::{SearchConfig, SubmodelPlan};
