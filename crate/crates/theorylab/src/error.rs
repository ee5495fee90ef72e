use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] chips_core::Error),
    /// The synthetic construction cannot support the check.
    #[error("degenerate world: {0}")]
    DegenerateWorld(String),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, LabError>;
