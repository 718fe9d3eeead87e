//! Numeric kernels behind the graph operations.

pub(crate) mod conv;
pub(crate) mod gemm;
