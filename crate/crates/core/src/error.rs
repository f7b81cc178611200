use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("degenerate curvature at power iteration {iteration}: Hessian-vector product norm {norm:e}")]
    DegenerateCurvature { iteration: usize, norm: f64 },

    #[error("cannot merge: layer {layer} has no significant weights")]
    NoSignificantWeights { layer: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for this error: 1 usage/config, 2 numeric, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericOverflow(_)
            | Error::DegenerateCurvature { .. }
            | Error::NoSignificantWeights { .. } => 2,
            Error::Io(_) | Error::Format(_) | Error::Csv(_) => 3,
            Error::Shape(_)
            | Error::InvalidArgument(_)
            | Error::Usage(_)
            | Error::Config(_)
            | Error::Json(_) => 1,
        }
    }
}
