//! Deterministic simulator for ensemble federated adversarial training.
//!
//! Small tanh MLPs are trained across simulated federated clients holding
//! non-IID data. Clients craft L-infinity adversarial examples on shared
//! public data, exchange them, train on the ensemble, and are aggregated with
//! FedAvg. A separately trained adversary model supplies black-box transfer
//! attacks for evaluation.

pub mod attacks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod gradcheck;
pub mod mlp;
pub mod rng;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
pub use eval::MetricsReport;
pub use mlp::{Dense, Gradients, MlpParams};
pub use tensor::Tensor;
