//! Batch front end: synthesis, training, extraction and reporting.

pub mod app;
pub mod commands;
pub mod config;
pub mod failure;
pub mod report;
pub mod svg;

pub use failure::{CliResult, Failure};
