//! Mixed-precision compute kernels: Int8, binary and float convolutions,
//! spatial reductions, hard-swish and batch-norm folding.

mod activation;
mod batchnorm;
mod conv;
mod pool;
pub mod reference;

pub use activation::{hard_swish, hard_swish_f32, hard_swish_q, hard_swish_q_to, HardSwishLut};
pub use batchnorm::{fold_batchnorm, BatchNormParams};
pub use conv::{
    conv2d_bin, conv2d_bin_layer, conv2d_bin_residual, conv2d_f32, conv2d_int8, int8_error_bound, BinConvWeights,
    ConvGeometry, ConvParams, Padding, Projection, ResidualSpec, MAX_ACCUMULATION_LENGTH,
};
pub use pool::{pool, pool_f32, pool_params, LearnedPool, PoolMode};
