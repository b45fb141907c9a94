//! Command-line entry points and the review HTTP API.

pub mod api;
pub mod commands;
pub mod error;
pub mod setup;
pub mod trace;

pub use error::CliError;
