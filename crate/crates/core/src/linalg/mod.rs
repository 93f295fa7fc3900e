//! Dense and sparse Cholesky machinery.

mod dense;
mod sparse;

pub use dense::Cholesky;
pub use sparse::{CsrMatrix, SkylineCholesky};
