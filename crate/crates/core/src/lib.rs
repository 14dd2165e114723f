//! Laplacian segmentation networks.
//!
//! A U-net with a low-rank Gaussian logit head is trained to a mode, a
//! diagonal Gauss-Newton Laplace posterior is fitted over its shared and
//! mean-head weights with a curvature recursion that is linear in the number
//! of pixels, and the resulting weight samples feed five uncertainty measures
//! that are benchmarked for out-of-distribution detection.

pub mod bench;
pub mod curvature;
pub mod error;
pub mod laplace;
pub mod measures;
pub mod net;
pub mod rng;
pub mod ssn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
