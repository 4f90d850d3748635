//! Federated training of width- and depth-sliced MLPs under per-client
//! memory and bandwidth budgets.
//!
//! Each round the server picks clients, looks up their budgets, assigns each
//! one a subnet of the global model that fits ([`search`]), trains the
//! subnets locally, folds them back element-wise ([`agg`]) and optionally
//! distills the global model into random subnets without data ([`distill`]).

pub mod agg;
pub mod config;
pub mod cost;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiments;
pub mod nn;
pub mod orchestrator;
pub mod report;
pub mod resource;
pub mod rng;
pub mod search;
pub mod space;

pub use agg::{aggregate, ClientUpdate, ParamStore, Weighting};
pub use config::{ExperimentConfig, Strategy};
pub use cost::{Budget, CostParams};
pub use error::{Error, Result};
pub use orchestrator::{run, RoundMetrics, RunOutput, Simulation};
pub use search::{SamplingPool, SearchOutcome, SearchParams};
pub use space::{SearchSpace, SubnetSpec};
