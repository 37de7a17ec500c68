//! Federated-learning orchestration kernel.

pub mod aggregation;
pub mod comm;
pub mod config;
pub mod error;
pub mod hooks;
pub mod metrics;
pub mod orchestrator;
pub mod partition;
pub mod privacy;
pub mod seed;
pub mod trainer;
pub mod types;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use types::{LocalUpdate, ParameterVector, Payload};
