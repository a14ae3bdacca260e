use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] reward_transfer::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config serialization: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("summary: {0}")]
    Summary(String),
    #[error("{0} certificate(s) failed")]
    CertificatesFailed(usize),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
