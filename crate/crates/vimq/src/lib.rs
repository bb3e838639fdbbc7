//! File formats, seeded experiments and the command line around `vimq-core`.

pub mod cli;
pub mod error;
pub mod experiments;
pub mod files;
pub mod report;

pub use error::{Error, Result};
pub use vimq_core;
