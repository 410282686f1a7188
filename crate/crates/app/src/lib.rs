//! Command-line front end: run configs, checkpoints, PNG output and the
//! `srddpm` subcommands.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod images;

pub use error::{AppError, AppResult, ExitStatus};
