//! Dense linear algebra, deterministic random streams and the symmetric
//! eigensolver used by the metrics.

mod linalg;
mod matrix;
mod rng;

pub use linalg::{orthonormal_basis, psd_eigvals, solve_spd, sym_eigvals};
pub use matrix::{dot, norm, norm_sq, sub, DenseMatrix};
pub use rng::{sample_truncated_gaussian, AlgorithmId, RngState, RngStream, ALGORITHM_ID};
