//! Local spatial-processing kernels: depth-wise convolution, dynamic filters,
//! local self-attention, and the ELSA block, with reverse-mode gradients, an
//! analytic cost counter, and a small training harness.

pub mod bench;
pub mod cli;
pub mod config;
pub mod elsa;
pub mod error;
pub mod grad;
pub mod model;
pub mod nn;
pub mod paradigm;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
