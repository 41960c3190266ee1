use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("symbol {symbol} out of range for an alphabet of {n_obs} symbols")]
    SymbolOutOfRange { symbol: usize, n_obs: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("rank deficient: singular value {index} is {value:e}, below tolerance {tol:e}")]
    RankDeficient { index: usize, value: f64, tol: f64 },
    #[error("weight block {block} is not positive definite after ridge {ridge:e}")]
    SingularWeight { block: usize, ridge: f64 },
    #[error("ill-conditioned transform: condition number {0:e}")]
    IllConditioned(f64),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
