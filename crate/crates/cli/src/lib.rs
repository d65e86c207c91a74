//! End-to-end harness: synthetic data generation, training, inference,
//! animation, evaluation and PLY export for the avatar pipeline.

pub mod config;
pub mod ops;
pub mod scene;
pub mod train;

pub use config::RunConfig;
pub use scene::{gen_data, load_scene, Scene};
pub use train::{train, TrainReport};

/// Process-level error classes; `exit_code` matches the documented CLI
/// contract (1 usage, 2 data, 3 numerical abort).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}
