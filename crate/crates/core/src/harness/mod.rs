//! Configuration, training orchestration, evaluation and the property-check
//! runner.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod plots;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{RunConfig, Schedule, Section};
pub use train::{StageId, TrainData, TrainOptions};
