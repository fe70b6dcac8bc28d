//! Experiment orchestration for softrec: configuration, staged per-seed
//! pipelines with a resumable manifest, seed summaries and plots.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod plot;
pub mod summary;

pub use config::RunConfig;
pub use manifest::RunManifest;
pub use pipeline::{run_pipeline, SeedRun, Stage};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {msg}")]
    Stage { stage: String, msg: String },
    #[error("comparison error: {0}")]
    Comparison(String),
    #[error("plot error: {0}")]
    Plot(String),
}

impl CliError {
    pub fn stage(stage: impl Into<String>, msg: impl ToString) -> Self {
        Self::Stage {
            stage: stage.into(),
            msg: msg.to_string(),
        }
    }

    /// 1 config, 2 stage failure, 3 comparison (plots count as comparisons).
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Stage { .. } => 2,
            Self::Comparison(_) | Self::Plot(_) => 3,
        }
    }
}
