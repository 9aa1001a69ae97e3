//! Command implementations behind the `contour-spt` binary.

pub mod commands;
pub mod config;

pub use commands::{cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, cmd_transform, UsageError};
pub use config::{Overrides, RunConfig};
