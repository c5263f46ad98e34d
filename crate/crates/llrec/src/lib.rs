//! Data loading, persistence, orchestration and the command-line front end
//! for the sequential recommenders in `llrec-core`.

pub mod bench;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
