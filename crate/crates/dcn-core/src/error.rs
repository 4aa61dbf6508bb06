use thiserror::Error;

#[derive(Debug, Error)]
pub enum DcnError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("dimension mismatch on axis {axis}: {detail}")]
    DimMismatch { axis: &'static str, detail: String },

    #[error("fixture format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid kernel plan: {0}")]
    Plan(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DcnError>;
