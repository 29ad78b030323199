//! Dense tensors, forward operations with analytic VJPs, and finite-difference
//! gradient checking.

pub mod gradcheck;
pub mod ops;
pub mod tensor;

pub use gradcheck::{finite_diff_check, DifferentiableMap, FnMap, GradCheckReport};
pub use ops::{
    affine, affine_vjp, gelu, gelu_vjp, l2_normalize_rows, l2_normalize_rows_vjp, matmul,
    matmul_vjp, max_reduce_rows, max_reduce_rows_vjp, weighted_sum_rows, weighted_sum_rows_vjp,
};
pub use tensor::Tensor;
