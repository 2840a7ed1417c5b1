//! File formats, command line and realtime bridge for `phrc-core`.

pub mod bridge;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod episode_log;
pub mod error;
pub mod eval;
pub mod predictors;

pub use error::{Error, Result};
