use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the registration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("unsupported PLY: {0}")]
    UnsupportedPly(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },

    #[error("cloud footprint {extent_x:.3} x {extent_y:.3} m is smaller than the cloth grid allows")]
    DegenerateExtent { extent_x: f64, extent_y: f64 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("no point above the canopy cutoff {cutoff:.3} m")]
    EmptyCanopy { cutoff: f64 },
    #[error("no keypoint exceeds the response threshold")]
    NoKeypoints,
    #[error("no keypoint pair is longer than the minimum separation")]
    NoPairs,
    #[error("no congruent pair candidates between the two images")]
    NoCandidates,
    #[error("matched image has no canopy cells")]
    NoCanopyCells,
    #[error("best image match rejected: overlap {best_overlap:.4} below {threshold:.4}")]
    MatchRejected { best_overlap: f64, threshold: f64 },

    #[error("only {found} correspondences survived gating (need {required})")]
    NoCorrespondences { found: usize, required: usize },
    #[error("no correspondences supplied")]
    EmptyCorrespondences,

    #[error("invalid plot spec: {0}")]
    SpecError(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn bad_value(key: &str, reason: impl Into<String>) -> Self {
        Error::BadValue {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
