//! Slice-level compute kernels used by the graph ops.
//!
//! Everything here works on flat row-major buffers with explicit
//! dimensions; shape validation happens one level up in [`crate::graph`].

pub mod conv;
pub mod elementwise;
pub mod matmul;
pub mod norm;
pub mod reduce;

pub use reduce::exact_sum;
