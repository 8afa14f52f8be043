//! Adversarial view optimisation for graph contrastive recommendation.
//!
//! The crate covers the full pipeline: interaction graphs, dataset
//! preparation, the linear graph encoder, loss functions, the two
//! adversarial perturbators, training and ranking evaluation.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod objectives;
pub mod optim;
pub mod projection;
pub mod structure;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
