//! Desk-scale experiment pipeline: configuration, shared pretrained state,
//! the attack x fine-tune matrix and timing summaries.

pub mod config;
pub mod lab;
pub mod manifest;
pub mod matrix;
pub mod plan;
pub mod timing;

pub use config::{ExperimentConfig, LabConfig};
pub use lab::{Lab, Subject};
pub use manifest::{output_root, RunManifest};
pub use matrix::{run_matrix, run_single, summarize, MatrixOptions, MatrixOutcome, MetricRow, Summary};
pub use plan::{AttackCell, Cell, ExperimentPlan, MatrixSpec};
pub use timing::{timing_report, TimingReport};
