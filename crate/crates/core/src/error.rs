use std::fmt;

/// Coarse classification used by front-ends to pick exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Contract,
}

#[derive(Debug)]
pub enum Error {
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    EmptySequence {
        row: usize,
    },
    NonFinite {
        op: &'static str,
    },
    ZeroNorm {
        row: usize,
    },
    NotScalar {
        shape: Vec<usize>,
    },
    StaleGraph,
    VocabRange {
        id: usize,
        vocab_size: usize,
    },
    EmptySentence {
        index: usize,
    },
    Rank {
        rank: usize,
        d_in: usize,
        d_out: usize,
    },
    AlreadyMerged,
    UndefinedCorrelation,
    NonFiniteLoss {
        step: usize,
    },
    Config(String),
    Data(String),
    Contract(String),
    Parse {
        line: usize,
        message: String,
    },
    Validation {
        line: usize,
        message: String,
    },
    AtSentence {
        index: usize,
        source: Box<Error>,
    },
    Io(std::io::Error),
    Json(serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Rank { .. } => ErrorKind::Config,
            Error::Data(_)
            | Error::Parse { .. }
            | Error::Validation { .. }
            | Error::EmptySentence { .. }
            | Error::VocabRange { .. }
            | Error::Io(_)
            | Error::Json(_) => ErrorKind::Data,
            Error::NonFinite { .. }
            | Error::ZeroNorm { .. }
            | Error::NonFiniteLoss { .. }
            | Error::UndefinedCorrelation
            | Error::EmptySequence { .. } => ErrorKind::Numeric,
            Error::AtSentence { source, .. } => source.kind(),
            Error::Shape { .. } | Error::NotScalar { .. } | Error::StaleGraph | Error::AlreadyMerged | Error::Contract(_) => {
                ErrorKind::Contract
            }
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}"),
            Error::EmptySequence { row } => write!(f, "mask row {row} selects no positions"),
            Error::NonFinite { op } => write!(f, "{op}: non-finite value produced"),
            Error::ZeroNorm { row } => write!(f, "row {row} has zero norm"),
            Error::NotScalar { shape } => write!(f, "expected a scalar, got shape {shape:?}"),
            Error::StaleGraph => write!(f, "graph already differentiated; record a new forward pass"),
            Error::VocabRange { id, vocab_size } => {
                write!(f, "token id {id} out of range for vocabulary of size {vocab_size}")
            }
            Error::EmptySentence { index } => write!(f, "sentence {index} is empty"),
            Error::Rank { rank, d_in, d_out } => write!(
                f,
                "adapter rank {rank} exceeds min(d_in={d_in}, d_out={d_out})"
            ),
            Error::AlreadyMerged => write!(f, "adapter already merged into base weights"),
            Error::UndefinedCorrelation => write!(f, "correlation undefined: zero variance after ranking"),
            Error::NonFiniteLoss { step } => write!(f, "non-finite loss at step {step}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violated: {msg}"),
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::Validation { line, message } => write!(f, "invalid record at line {line}: {message}"),
            Error::AtSentence { index, source } => write!(f, "sentence {index}: {source}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            Error::AtSentence { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
