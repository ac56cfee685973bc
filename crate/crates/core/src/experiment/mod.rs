//! Run directories, presets and the staged pipeline that ties the other
//! modules together.

pub mod config;
pub mod recipe;
pub mod report;
pub mod stages;

pub use config::{BokStage, ExperimentConfig, ModelConfig, RaftStage, PRESETS};
pub use recipe::{metrics_csv, open_existing, read_hash_stamp, Run, Stage, StageRecord, StageStatus, METRICS_HEADER};
pub use report::{build_report, report, Cell, Report, Row};
