//! Synthetic world generation, dataset I/O, pipeline orchestration, ATE
//! evaluation and the command-line front end.

use std::path::PathBuf;

use thiserror::Error;

pub mod cli;
pub mod dataset;
pub mod eval;
pub mod pipeline;
pub mod scene;
pub mod simulate;

pub use dataset::{ingest, load_trajectory, read_trajectory, save_trajectory, write_trajectory, Dataset, StampedPose};
pub use eval::{evaluate_ate, AteMode, EvalReport};
pub use pipeline::{dead_reckoning, export, run_pipeline, Ablation, FrameDiagnostics, PipelineConfig, PipelineOutput};
pub use scene::{CircleTrajectory, PlaneSpec, SceneConfig};
pub use simulate::generate_scene;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{}:{line}: timestamp {t} does not increase", path.display())]
    NonMonotonic { path: PathBuf, line: usize, t: f64 },
    #[error("stream missing: {0}")]
    MissingStream(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no timestamps matched between estimate and ground truth")]
    NoMatches,
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        HarnessError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// 2 for numerical failures, 1 for everything caused by inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Numerical(_) => 2,
            _ => 1,
        }
    }
}
