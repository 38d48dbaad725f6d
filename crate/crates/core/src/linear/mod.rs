//! Sparse real linear systems: triplet assembly, fill-reducing ordering and
//! direct LU factorization.

mod lu;
mod ordering;
mod sparse;

pub use lu::{factor_solve, LuSolver};
pub use ordering::minimum_degree;
pub use sparse::{assemble, SparseSystem};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SingularReason {
    /// Every entry of the row is zero.
    ZeroRow,
    /// Every entry of the column is zero.
    ZeroColumn,
    /// No usable pivot remained for the column during elimination.
    ZeroPivot,
}

/// Where and why a factorization failed. `index` is a row for
/// [`SingularReason::ZeroRow`] and a column (unknown) otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("singular system at index {index} ({reason:?})")]
pub struct SingularityReport {
    pub index: usize,
    pub reason: SingularReason,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AssemblyError {
    #[error("entry ({row}, {col}) outside a {n}x{n} system")]
    OutOfRange { row: usize, col: usize, n: usize },
}
