use std::fmt;
use std::path::PathBuf;

/// Which side of a referring triplet an error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Target,
    Reference,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Target => f.write_str("target"),
            Role::Reference => f.write_str("reference"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("validation error at `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },
    #[error("empty point cloud: {0}")]
    EmptyCloud(String),
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),
    #[error("schema mismatch: model expects {expected}, got {found}")]
    SchemaMismatch { expected: String, found: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("unsupported model version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt model file: {0}")]
    CorruptModel(String),
    #[error("no candidates for {0}")]
    NoCandidates(Role),
    #[error("no valid (target, reference) pairs")]
    NoValidPairs,
    #[error("could not place {0} objects without interpenetration")]
    PlacementFailure(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty evaluation set")]
    EmptySet,
    #[error("refusing to overwrite existing path {0} (pass --force)")]
    WouldOverwrite(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl fmt::Display) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation { .. }
                | Error::DimensionMismatch { .. }
                | Error::SchemaMismatch { .. }
                | Error::VersionMismatch { .. }
                | Error::CorruptModel(_)
                | Error::WouldOverwrite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
