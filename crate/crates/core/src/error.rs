use std::fmt;

/// Which line-level defect a feature file had.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    EmptyFile,
    MalformedHeader,
    RowLength,
    BadLabel,
    BadFloat,
    RowCount,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParseErrorKind::EmptyFile => "empty file",
            ParseErrorKind::MalformedHeader => "malformed header",
            ParseErrorKind::RowLength => "row length mismatch",
            ParseErrorKind::BadLabel => "non-integer label",
            ParseErrorKind::BadFloat => "invalid float",
            ParseErrorKind::RowCount => "row count mismatch",
        };
        f.write_str(s)
    }
}

/// Broad failure class, used by the command line to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("degenerate normalization: {0}")]
    Degenerate(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("line {line}: {kind}: {msg}")]
    Parse {
        line: usize,
        kind: ParseErrorKind,
        msg: String,
    },
    #[error("split error: {0}")]
    Split(String),
    #[error("sampler error: {0}")]
    Sampler(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn parse(line: usize, kind: ParseErrorKind, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            kind,
            msg: msg.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config { .. } | Error::Param(_) => ErrorClass::Config,
            Error::Parse { .. }
            | Error::Io(_)
            | Error::Checkpoint(_)
            | Error::Split(_)
            | Error::Sampler(_)
            | Error::Label { .. } => ErrorClass::Data,
            Error::Shape { .. }
            | Error::Degenerate(_)
            | Error::NonFinite(_)
            | Error::Divergence(_)
            | Error::GradCheck(_) => ErrorClass::Numerical,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
