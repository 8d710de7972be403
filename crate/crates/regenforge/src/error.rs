use std::path::PathBuf;

use regenforge_core::distance::DistanceError;
use regenforge_core::eval::EvalError;
use regenforge_core::folds::FoldError;
use regenforge_core::manifest::ManifestError;
use regenforge_core::mask::MaskError;
use regenforge_core::mix::MixError;
use regenforge_core::pair::PairError;
use regenforge_core::prompt::PromptError;
use regenforge_core::pseudo::PseudoError;
use regenforge_core::raster::RasterError;
use regenforge_core::review::ReviewError;
use regenforge_core::stats::StatsError;
use regenforge_core::taxonomy::TaxonomyError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("classifier plugin: {0}")]
    Plugin(String),
    #[error("server: {0}")]
    Server(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Distance(#[from] DistanceError),
    #[error(transparent)]
    Fold(#[from] FoldError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Pseudo(#[from] PseudoError),
    #[error(transparent)]
    Pair(#[from] PairError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Review(#[from] ReviewError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// 1 for bad input or configuration, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Image { .. } | Error::Plugin(_) | Error::Server(_) | Error::Pseudo(_) => 2,
            _ => 1,
        }
    }
}
