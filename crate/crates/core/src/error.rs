use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or sizes that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Train-mode batch normalization over a single value per channel.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown {kind} `{name}`")]
    Lookup { kind: &'static str, name: String },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("unpaired images: {}", .0.join(", "))]
    Pairing(Vec<String>),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", .path.display())]
    Ppm {
        path: PathBuf,
        #[source]
        source: crate::data::ppm::PpmError,
    },

    #[error(transparent)]
    Checkpoint(#[from] crate::train::checkpoint::CheckpointError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}

pub(crate) use dim_err;
