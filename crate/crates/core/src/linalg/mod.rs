//! Dense linear algebra used throughout the crate.
//!
//! Storage is `f32`; every reduction (products, norms, Gram matrices)
//! accumulates in `f64` in a fixed order, so results are bit-reproducible
//! for identical inputs regardless of thread count.

mod eigen;
mod matrix;
mod ops;
mod svd;

pub use eigen::symmetric_eigen;
pub use matrix::{check_indices, complement, DenseMatrix};
pub use ops::{frobenius_dist_sq, frobenius_norm_sq, gelu, gelu_scalar, gelu_tanh, matmul, std_normal_cdf};
pub use svd::{truncated_svd, LowRankFactors};
