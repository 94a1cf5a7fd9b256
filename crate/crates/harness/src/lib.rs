//! Experiment orchestration for latent-space bias correction: configs,
//! pipeline stages, on-disk artifacts and CSV reports.

pub mod config;
pub mod experiment;
pub mod pipeline;
pub mod report;
pub mod store;
