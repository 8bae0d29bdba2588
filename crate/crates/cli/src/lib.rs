//! Library half of the experiment harness: config parsing, the evaluation
//! pipeline, and the command implementations shared with the binary.

pub mod commands;
pub mod config;
pub mod pipeline;
