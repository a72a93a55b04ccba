//! Mixed-precision keypoint detection and description: quantized and binary
//! kernels, the binary descriptor normalization layer, Hamming matching,
//! homography evaluation and the block-wise precision search.

pub mod binnorm;
pub mod error;
pub mod homeval;
pub mod imageio;
pub mod kernels;
pub mod matcher;
pub mod mpsearch;
pub mod netgraph;
pub mod qtensor;
