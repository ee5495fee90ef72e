//! Synthetic worlds with known ground truth, used to check the claims behind
//! the CHIPS score as statistical assertions.
//!
//! * [`descent`]: one-step selection versus random on toy dual encoders
//! * [`moments`]: Monte-Carlo check of the mini-batch second-moment identity
//! * [`proxy`]: end-point versus full-parameter alignment correlation
//! * [`sketchbias`]: sketch variance and curvature-mixing bias
//! * [`adamw`]: first-order prediction of an AdamW step
//!
//! Every check returns a [`Report`]; reports serialize to one JSON line each.

pub mod adamw;
pub mod descent;
mod error;
pub mod moments;
pub mod proxy;
mod report;
pub mod sketchbias;
pub mod toy;

pub use error::{LabError, Result};
pub use report::Report;
