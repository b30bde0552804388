//! Tensor container, elementary kernels, counter-based RNG, and tensor I/O.

pub mod io;
pub mod rng;
pub mod tensor;

pub use io::{read_tensor, write_tensor};
pub use rng::{counter_normal, counter_rng, counter_rng_u64, mix64, StreamKey};
pub use tensor::{
    add, add_bias, axpy, col_sum, group_minmax, matmul, sub, transpose, Precision, Tensor,
};
