//! Deterministic simulation harness and attack analysis for the `spores`
//! protocol library.

pub mod analysis;
pub mod config;
pub mod events;
pub mod experiment;
pub mod metrics;
pub mod model;

pub use config::ExperimentConfig;
pub use events::{Event, EventType};
pub use experiment::{run_experiment, RunOutput};
pub use model::ModelKind;
