//! Federated learning and unlearning simulation with task arithmetic.
//!
//! Clients train two task vectors per round: a main vector aggregated with
//! FedAvg and a standalone vector kept apart from aggregation. A target
//! client's influence can then be removed by subtracting its standalone vector
//! (SATA) or by one of the baseline strategies in [`unlearning`].

pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod model;
pub mod optim;
pub mod param_space;
pub mod rng;
pub mod unlearning;

pub use data::{Dataset, Partition, Split};
pub use error::{Error, Result};
pub use federation::{AnchorMode, Federation, Phase, RoundReport, ServerState, TrainSettings};
pub use model::{Activation, Model, ModelSpec};
pub use optim::{AdamWConfig, AdamWState};
pub use param_space::{combine, task_vector, ParamVector, Regime, TaskVector};
pub use unlearning::{Strategy, UnlearnRequest};
