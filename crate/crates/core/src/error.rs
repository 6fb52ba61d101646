use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("cannot encode value: {0}")]
    Encoding(String),

    #[error("incompatible ciphertexts: {0}")]
    Incompatible(String),

    #[error("protocol error{}: {msg}", client.map(|c| format!(" (client {c})")).unwrap_or_default())]
    Protocol { client: Option<usize>, msg: String },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn protocol(client: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Protocol {
            client,
            msg: msg.into(),
        }
    }
}
