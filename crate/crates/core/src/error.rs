use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the laboratory.
///
/// Every variant maps to a stable numeric code (see [`LabError::code`]) that
/// the CLI prints in its error record and the C ABI returns to callers.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("enumerating C({n},{k}) = {count} masks exceeds the cap of {cap}")]
    EnumerationCap {
        n: usize,
        k: usize,
        count: u128,
        cap: u128,
    },

    #[error("gradient reports disagree on parameter ids: {0}")]
    KeyMismatch(String),

    #[error("no fake gradient within tau = {tau} after {regenerations} pool regenerations (closest {closest})")]
    RegenerationsExhausted {
        tau: f64,
        regenerations: usize,
        closest: f64,
    },

    #[error("{phase}: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<LabError>,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("truncated {what}: needed {needed} bytes, found {found}")]
    Truncated {
        what: String,
        needed: usize,
        found: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn dimension(
        context: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        LabError::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_phase(self, phase: impl Into<String>) -> Self {
        LabError::Phase {
            phase: phase.into(),
            source: Box::new(self),
        }
    }

    /// Stable error code. Zero is reserved for success.
    pub fn code(&self) -> i32 {
        match self {
            LabError::Dimension { .. } => 10,
            LabError::InvalidArgument(_) => 11,
            LabError::EnumerationCap { .. } => 12,
            LabError::KeyMismatch(_) => 13,
            LabError::RegenerationsExhausted { .. } => 20,
            LabError::Phase { source, .. } => source.code(),
            LabError::Format { .. } => 30,
            LabError::Truncated { .. } => 31,
            LabError::Io { .. } => 32,
            LabError::Config(_) => 40,
        }
    }

    /// Short machine-readable kind string.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Dimension { .. } => "dimension",
            LabError::InvalidArgument(_) => "invalid_argument",
            LabError::EnumerationCap { .. } => "enumeration_cap",
            LabError::KeyMismatch(_) => "key_mismatch",
            LabError::RegenerationsExhausted { .. } => "regenerations_exhausted",
            LabError::Phase { source, .. } => source.kind(),
            LabError::Format { .. } => "format",
            LabError::Truncated { .. } => "truncated",
            LabError::Io { .. } => "io",
            LabError::Config(_) => "config",
        }
    }
}
