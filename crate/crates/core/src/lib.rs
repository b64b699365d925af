//! Model-based convolutional de-aliasing for parallel MRI.
//!
//! An unrolled split-Bregman iteration whose data-consistency, filtering,
//! nonlinearity and multiplier updates are network layers with learnable
//! parameters, trained end to end on simulated multi-coil data.

pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod sampling;
pub mod simdata;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{
    fft2_centered, ifft2_centered, rss_combine, zero_filled, ComplexImageStack, KSpaceStack, RealImage, Shape,
};
pub use sampling::{MaskPattern, SamplingMask};
