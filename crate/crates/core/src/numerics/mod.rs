// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensor math, seeded randomness and the kernels the model needs.

pub mod gemm;
mod kernels;
mod rng;
mod scalar;
mod svd;
mod tensor;

pub use kernels::{
    gelu, gelu_grad, gelu_tensor, layernorm, layernorm_rows, softmax_in_place, softmax_naive,
    softmax_online, LnStats, OnlineSoftmax,
};
pub use rng::{seeded_permutation, SeededRng};
pub use scalar::{Precision, Scalar};
pub use svd::{svd_small, SvdFactors, MAX_SVD_DIM};
pub use tensor::Tensor;
