//! Process exit codes.
//!
//! | code | meaning |
//! |---|---|
//! | 0 | success |
//! | 2 | bad configuration or usage |
//! | 3 | unreadable or malformed file |
//! | 4 | numerical failure |
//! | 5 | unusable data (empty pool, duplicate ids, degenerate samples) |
//! | 6 | a verification check failed |

use chips_core::Error;
use chips_theorylab::LabError;

pub const OK: u8 = 0;
pub const CONFIG: u8 = 2;
pub const FORMAT: u8 = 3;
pub const NUMERICAL: u8 = 4;
pub const DATA: u8 = 5;
pub const VERIFY_FAILED: u8 = 6;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0} check(s) failed")]
    VerificationFailed(usize),
}

pub fn core_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => CONFIG,
        Error::Format(_) | Error::CorruptShard { .. } | Error::Io(_) | Error::SketchMismatch { .. } => FORMAT,
        Error::NumericalBreakdown(_) | Error::IndefiniteSurrogate { .. } | Error::Overflow(_) => NUMERICAL,
        Error::Shape(_)
        | Error::DegenerateEmbedding { .. }
        | Error::InsufficientBatch(_)
        | Error::MarginUndefined
        | Error::DuplicateSample(_)
        | Error::DegenerateDistribution
        | Error::EmptyPool(_)
        | Error::IndexOutOfRange { .. } => DATA,
    }
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Core(e) => core_code(e),
            CliError::Lab(LabError::Core(e)) => core_code(e),
            CliError::Lab(LabError::DegenerateWorld(_)) => NUMERICAL,
            CliError::Lab(LabError::Config(_)) | CliError::Usage(_) => CONFIG,
            CliError::Io(_) => FORMAT,
            CliError::VerificationFailed(_) => VERIFY_FAILED,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct_per_class() {
        assert_eq!(CliError::from(Error::Config("x".into())).code(), CONFIG);
        assert_eq!(CliError::from(Error::Format("x".into())).code(), FORMAT);
        assert_eq!(CliError::from(Error::NumericalBreakdown("x".into())).code(), NUMERICAL);
        assert_eq!(CliError::from(Error::DuplicateSample(3)).code(), DATA);
        assert_eq!(CliError::VerificationFailed(1).code(), VERIFY_FAILED);
        assert_eq!(CliError::from(LabError::Core(Error::MarginUndefined)).code(), DATA);
    }
}
