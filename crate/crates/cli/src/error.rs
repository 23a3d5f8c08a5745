use lightsq::abstraction::AbstractionError;
use lightsq::config::ConfigError;
use lightsq::grid::GridError;
use lightsq::mesh::MeshError;
use lightsq::pipeline::PipelineError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Grid { path: String, source: GridError },
    #[error("{path}: {source}")]
    Mesh { path: String, source: MeshError },
    #[error("{path}: {source}")]
    Abstraction { path: String, source: AbstractionError },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("the abstraction has no primitives")]
    Empty,
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub const EXIT_FAILURE: i32 = 1;
    pub const EXIT_IO: i32 = 2;
    pub const EXIT_NOT_WATERTIGHT: i32 = 3;
    pub const EXIT_EMPTY: i32 = 4;

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Unreadable, missing or malformed files are I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Grid {
                source: GridError::NonWatertightMesh { .. },
                ..
            } => Self::EXIT_NOT_WATERTIGHT,
            CliError::Io { .. } | CliError::Grid { .. } | CliError::Mesh { .. } | CliError::Abstraction { .. } => {
                Self::EXIT_IO
            }
            CliError::Config(ConfigError::Io(_)) => Self::EXIT_IO,
            CliError::Empty => Self::EXIT_EMPTY,
            CliError::Config(_) | CliError::Pipeline(_) | CliError::Usage(_) => Self::EXIT_FAILURE,
        }
    }
}
