//! Dense/convolutional network core: forward pass, reverse pass, per-layer
//! vector-Jacobian products and skip-connection composition.

pub(crate) mod kernels;
mod layer;
mod network;
mod unet;

pub(crate) use layer::{avg_pool_transpose, sigmoid, upsample_transpose};
pub use layer::{Conv2d, Dense, Layer, LayerKind};
pub use network::{Network, Trace};
pub use unet::{build_unet, ArchitectureConfig, ParamPartition, SegForward, SegNet};
