use std::path::PathBuf;

use crate::region_matching::MatchingError;

/// Errors produced anywhere in the stylization pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("state error: {0}")]
    State(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate {side} region {region}: {reason}")]
    DegenerateRegion {
        side: &'static str,
        region: usize,
        reason: String,
    },
    #[error("degenerate palette: {0}")]
    DegeneratePalette(String),
    #[error("external dependency unavailable: {0}")]
    ExternalDependency(String),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error("training diverged at iteration {iteration} (last good checkpoint: {last_good:?})")]
    Divergence {
        iteration: usize,
        last_good: Option<PathBuf>,
    },
    #[error("resource error: {0}")]
    Resource(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
