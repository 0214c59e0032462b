use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    /// Bad or missing input data.
    #[error("data error: {0}")]
    Data(String),
    /// Bad flags, config files or checkpoints.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] mtldr_core::Error),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;

impl AppError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io { context: context.into(), source }
    }

    /// Process exit code: 1 for data problems, 2 for usage and config.
    pub fn exit_code(&self) -> i32 {
        use mtldr_core::Error as E;
        match self {
            Self::Config(_) | Self::Core(E::Config(_) | E::Format(_)) => 2,
            _ => 1,
        }
    }
}
