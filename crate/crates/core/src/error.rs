use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: left is {left:?}, right is {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("tensor `{tensor}`: {reason}")]
    Tensor { tensor: String, reason: String },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_layer(self, layer: usize) -> Self {
        Error::Layer {
            layer,
            source: Box::new(self),
        }
    }

    /// Process exit code for the command-line front end:
    /// 2 configuration, 3 data/parse, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Partition(_) => 2,
            Error::Dimension { .. }
            | Error::InvalidModel(_)
            | Error::Tensor { .. }
            | Error::Format(_)
            | Error::Degenerate(_)
            | Error::Io(_)
            | Error::Json(_) => 3,
            Error::UndefinedSimilarity(_) | Error::Numeric(_) => 4,
            Error::Layer { source, .. } => source.exit_code(),
        }
    }
}
