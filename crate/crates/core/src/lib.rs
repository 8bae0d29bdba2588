//! Core library for multi-modal survival pretraining.

pub mod cpm;
pub mod data;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod mpe;
pub mod numeric;
pub mod optim;
pub mod pretrain;
pub mod survival;

pub use error::{CoreError, Result};
