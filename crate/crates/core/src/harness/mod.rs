//! Dataset synthesis, persistence, configuration, orchestration and reports.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod report;
