use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("incompatible models: {0}")]
    IncompatibleModels(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: i64, classes: usize },
    #[error("invalid score: {0}")]
    InvalidScore(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged (non-finite loss) for config {config}")]
    Divergence { config: String },
    #[error("empty candidate pool")]
    EmptyPool,
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("checksum mismatch: header says {expected:#010x}, payload is {actual:#010x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short category name, used as the prefix of CLI error messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::IncompatibleModels(_) | Error::Shape(_) => "shape",
            Error::InvalidWeights(_)
            | Error::InvalidParameter(_)
            | Error::InvalidDistribution(_)
            | Error::InvalidScore(_)
            | Error::Domain(_)
            | Error::DegenerateVector(_) => "argument",
            Error::Label { .. } | Error::Parse { .. } | Error::EmptyDataset(_) => "data",
            Error::Config(_) | Error::EmptyPool | Error::NotFound(_) => "config",
            Error::Divergence { .. } => "training",
            Error::Format { .. } | Error::Checksum { .. } => "format",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code for the category (always nonzero).
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "data" => 3,
            "io" => 4,
            "format" => 5,
            "training" => 6,
            "shape" => 7,
            _ => 8,
        }
    }
}
