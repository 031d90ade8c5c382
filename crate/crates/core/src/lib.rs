//! Group-connected multilayer perceptrons: a small reverse-mode tensor
//! library, the grouped layers, training, data utilities and analysis of
//! learned feature groups.

pub mod analysis;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{GmlpError, Result};
