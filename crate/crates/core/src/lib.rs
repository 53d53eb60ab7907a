//! Hybrid Winograd/FFT convolution engines with an operation-count cost
//! model, a power-of-two resource allocator and an Inception-style network
//! executor.
//!
//! The numerical core is generic over [`Scalar`] (f32, f64); exact
//! transform construction is generic over [`Field`] (rationals, f64); the
//! fixed-point paths are generic over [`Fixed`] (i16, i8).

pub mod allocator;
pub mod costmodel;
pub mod error;
pub mod fft;
pub mod netgraph;
pub mod num;
pub mod reference;
pub mod stats;
pub mod tensor;
pub mod winograd;

pub use allocator::{branch_allocate, interlayer_partition, AllocationPlan, BranchAllocation};
pub use costmodel::{choose_algorithm, cost, Algorithm, CostReport, CostWeights};
pub use error::{Error, Result};
pub use fft::{fft_conv, pad_size, FftKernels, FftPlan};
pub use netgraph::{parse_network, plan_network, run_network, verify_pair, Executor, NetworkPlan, NetworkSpec, WeightStore};
pub use num::{Field, Fixed, Scalar};
pub use reference::{conv_direct, conv_direct_fixed, ConvShape, PoolSpec};
pub use stats::ConvStats;
pub use tensor::{AnyTensor, DType, Tensor, WeightTensor};
pub use winograd::{cook_toom, winograd_conv, Transforms, WinogradKernels, WinogradPlan};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Fix16Tensor = Tensor<i16>;
pub type Fix8Tensor = Tensor<i8>;
pub type Weights64 = WeightTensor<f64>;
pub type Weights32 = WeightTensor<f32>;
pub type WinogradPlan64 = WinogradPlan<f64>;
pub type WinogradPlan32 = WinogradPlan<f32>;
pub type ExactTransforms = Transforms<num_rational::BigRational>;
