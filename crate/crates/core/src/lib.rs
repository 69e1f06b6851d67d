//! Dynamic busyness-graph forecasting of hourly POI visit counts.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod graphgen;
mod init;
pub mod metanodes;
pub mod model;
pub mod pipeline;
pub mod semantics;
pub mod training;

pub use config::{Ablation, LossKind, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::BysGnn;
