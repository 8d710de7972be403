//! Command line, file formats, classifier plugins and the review service
//! built on `regenforge-core`.

pub mod batch;
pub mod cli;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod io;
pub mod plugin;
pub mod report;
pub mod run_manifest;
pub mod service;

pub use error::{Error, Result};
