//! Two-stage coordination of automated vehicles through conflict zones.
//!
//! Stage one solves a mixed-integer QP built from a quadratic approximation
//! around the uncoordinated optima to choose crossing orders. Stage two
//! solves the nonlinear trajectory problem with those orders fixed.

pub mod error;
pub mod linalg;
pub mod qp;
pub mod scenario;
pub mod dynamics;
pub mod transcription;
pub mod sqp;
pub mod bnb;
pub mod coordinator;
pub mod oracle;

pub use error::{Error, Result};
