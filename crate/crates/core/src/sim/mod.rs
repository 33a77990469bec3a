//! Deterministic FedAvg simulation at desk scale.

pub mod data;
pub mod fedavg;
pub mod model;
pub mod sweep;

pub use data::{generate_synthetic, DataSpec, Dataset, FederatedData};
pub use fedavg::{
    aggregate, local_train, run_federated, run_federated_traced, BudgetSpec, ClientRecord,
    CompressorSpec, FLConfig, RoundMetrics, RoundTrace,
};
pub use model::{Model, ModelSpec};
pub use sweep::{SweepReport, SweepSpec, Target};
