use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] specmoment_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("line {line}: unknown token '{token}'")]
    UnknownToken { token: String, line: usize },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("{0} contains no sequences")]
    EmptyInput(String),
    #[error("all {0} test sequences have true probability below the exclusion floor")]
    AllExcluded(usize),
    #[error("test set is empty")]
    EmptyTestSet,
}

pub type Result<T> = std::result::Result<T, BenchError>;
