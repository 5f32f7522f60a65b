//! Experiment runner: configuration, staged pipelines, persistence and
//! plot-data export for `latentrl`.
#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN-rejecting range checks

pub mod config;
pub mod error;
pub mod export;
pub mod inspect;
pub mod pipeline;

pub use config::{ConfigSources, ExperimentConfig, Stage};
pub use error::{Result, RunError};
pub use export::export_plot_data;
pub use pipeline::{run, RunOutcome, StageSummary};
