use thiserror::Error;

/// Error type shared across the whole engine.
///
/// Variants map onto the CLI exit-code classes: `Config` is a usage/config
/// problem (exit 2), `Data`/`Schema`/`Io` are data problems (exit 3), and
/// `Shape`/`Numeric`/`Contract` are numeric failures (exit 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("schema error: missing column {0:?}")]
    Schema(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
