//! Host-side harness for `fedssd-core`: run specifications, dataset and
//! checkpoint files, a threaded client executor and the subcommands behind
//! the `fedssd` binary.

pub mod commands;
pub mod config;
mod error;
pub mod exec;
pub mod formats;

pub use error::{Error, Result};
