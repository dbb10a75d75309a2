//! Multi-task delivery-delay prediction: tabular embeddings, a shared MLP
//! backbone, a delay classifier that routes between two quantile regression
//! heads, two-stage training, per-head conformalized quantile regression and
//! interval-quality evaluation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conformal;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
