//! Experiment runner: declarative configs, staged runs and CSV reports.

pub mod config;
pub mod error;
pub mod experiment;
pub mod records;
pub mod report;
