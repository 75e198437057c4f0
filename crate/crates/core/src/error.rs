use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, printed by the CLI and mapped by the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "E_DIMENSION",
            Error::Contract(_) => "E_CONTRACT",
            Error::NonFinite(_) => "E_NON_FINITE",
            Error::Config(_) => "E_CONFIG",
            Error::Divergence(_) => "E_DIVERGENCE",
            Error::Format(_) => "E_FORMAT",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    /// Process exit status used by the CLI for this error class.
    pub fn exit_status(&self) -> i32 {
        match self {
            Error::Dimension(_) => 10,
            Error::Contract(_) => 11,
            Error::NonFinite(_) => 12,
            Error::Config(_) => 13,
            Error::Divergence(_) => 14,
            Error::Format(_) => 15,
            Error::Io(_) => 16,
            Error::Json(_) => 17,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use {config_err, contract_err, dim_err};
