//! Experiment driver: dataset synthesis, the staged pipeline, the ablation
//! grid, evaluation and leakage audits. Every command reads and writes only
//! inside its run directory.

mod ablation;
mod audit;
mod config;
mod data;
mod eval;
mod pipeline;
mod stages;

pub use ablation::{cmd_ablate, AblationRow, AblationTable, Condition};
pub use audit::cmd_audit;
pub use config::{
    AblationConfig, AdaptConfig, AdaptMode, DataConfig, EvalConfig, RunConfig, StageSwitches,
    Thresholds,
};
pub use data::{cmd_synth, git_hash, Dataset, DATA_DIR};
pub use eval::{cmd_eval, EvalRequest, Evaluator};
pub use pipeline::{cmd_pipeline, cmd_pipeline_from_manifest, RunManifest, StageRecord, STAGE_ORDER};
pub use stages::SeedContext;

use std::fmt::Display;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::policy::ModelError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {msg}")]
    Stage { stage: String, msg: String },
    #[error("acceptance thresholds not met: {0}")]
    Threshold(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Threshold(_) => 4,
            _ => 3,
        }
    }

    pub(crate) fn stage(stage: &str) -> impl Fn(&dyn Display) -> ExperimentError + '_ {
        move |e| ExperimentError::Stage {
            stage: stage.to_string(),
            msg: e.to_string(),
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
        move |source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => ExperimentError::Config(m),
            other => ExperimentError::Stage {
                stage: "model".into(),
                msg: other.to_string(),
            },
        }
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(ExperimentError::io(parent))?;
    }
    std::fs::write(path, contents).map_err(ExperimentError::io(path))
}
