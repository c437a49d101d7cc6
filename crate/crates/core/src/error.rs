use thiserror::Error;

#[derive(Debug, Error)]
pub enum PideError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite values detected in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("gamma function pole at non-positive integer {0}")]
    GammaPole(f64),
    #[error("eigenvalue iteration did not converge after {0} sweeps")]
    EigenNoConvergence(usize),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PideError>;

impl PideError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        PideError::ShapeMismatch { op, detail: detail.into() }
    }
}
