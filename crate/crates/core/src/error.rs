use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// [`Error::kind`] gives a stable, machine-readable name for each variant; the
/// command line surfaces it in its JSON error object.
#[derive(Debug, Error)]
pub enum Error {
    #[error("volume contains non-finite values ({count} voxels)")]
    NonFiniteInput { count: usize },

    #[error("voxel grids are not compatible: {0}")]
    IncompatibleGrids(String),

    #[error("mask has no true voxels")]
    EmptyMask,

    #[error("invalid voxel grid: {0}")]
    InvalidGrid(String),

    #[error("value array has {actual} elements, grid needs {expected}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("expected {expected} semantics, got {actual}")]
    WrongSemantics {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("histogram is degenerate: all values equal")]
    DegenerateHistogram,

    #[error("thresholding produced no foreground voxels")]
    NoForeground,

    #[error("invalid contour parameters: {0}")]
    InvalidParams(String),

    #[error("ensemble needs at least 2 members, got {0}")]
    TooFewMembers(usize),

    #[error("threshold calibration needs at least 2 cases, got {0}")]
    TooFewCalibrationCases(usize),

    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),

    #[error("each sample needs at least 2 values")]
    TooFewSamples,

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("invalid phantom or simulation spec: {0}")]
    InvalidSpec(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("corrupt NIfTI header: {0}")]
    CorruptHeader(String),

    #[error("big-endian NIfTI files are not supported")]
    EndiannessUnsupported,

    #[error("data truncated: expected {expected} bytes, found {actual}")]
    TruncatedData { expected: usize, actual: usize },

    #[error("input not found: {}", .0.display())]
    InputNotFound(PathBuf),

    #[error("MAE requested but no reference CT for case {0}")]
    MissingReference(String),

    #[error("malformed case directory {}: {reason}", .path.display())]
    MalformedCase { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("I/O failure on {}: {source}", .path.display())]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {}: {source}", .path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFiniteInput { .. } => "NonFiniteInput",
            Error::IncompatibleGrids(_) => "IncompatibleGrids",
            Error::EmptyMask => "EmptyMask",
            Error::InvalidGrid(_) => "InvalidGrid",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::WrongSemantics { .. } => "WrongSemantics",
            Error::DegenerateHistogram => "DegenerateHistogram",
            Error::NoForeground => "NoForeground",
            Error::InvalidParams(_) => "InvalidParams",
            Error::TooFewMembers(_) => "TooFewMembers",
            Error::TooFewCalibrationCases(_) => "TooFewCalibrationCases",
            Error::InvalidThreshold(_) => "InvalidThreshold",
            Error::TooFewSamples => "TooFewSamples",
            Error::ZeroVariance(_) => "ZeroVariance",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::UnsupportedDatatype(_) => "UnsupportedDatatype",
            Error::CorruptHeader(_) => "CorruptHeader",
            Error::EndiannessUnsupported => "EndiannessUnsupported",
            Error::TruncatedData { .. } => "TruncatedData",
            Error::InputNotFound(_) => "InputNotFound",
            Error::MissingReference(_) => "MissingReference",
            Error::MalformedCase { .. } => "MalformedCase",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::IoFailure { .. } => "IoFailure",
            Error::Json { .. } => "Json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::InputNotFound(path)
        } else {
            Error::IoFailure { path, source }
        }
    }

    pub(crate) fn write_io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
