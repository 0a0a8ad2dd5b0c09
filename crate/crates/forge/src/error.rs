use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, ForgeError>;

#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Core(#[from] lfads_core::Error),
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("training diverged at step {step}: {cause}; last good checkpoint: {}", last_good.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    Diverged {
        step: u64,
        cause: String,
        last_good: Option<PathBuf>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
}

impl ForgeError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| ForgeError::Io { path, source }
    }

    pub fn json(context: impl Into<String>) -> impl FnOnce(serde_json::Error) -> Self {
        let context = context.into();
        move |source| ForgeError::Json { context, source }
    }
}
