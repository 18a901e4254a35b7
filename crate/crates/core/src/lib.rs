//! Sparse mixture-of-experts denoising for grayscale images whose noise
//! varies across the field of view.
//!
//! An image is cut into overlapping patches (optionally split further by a
//! segmentation mask), each region is routed by a hard one-hot gate to a
//! single residual CNN expert, and the denoised regions are averaged back
//! together.

// `!(a > b)` is used on purpose so NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(
    clippy::needless_range_loop,
    clippy::too_many_arguments,
    clippy::type_complexity
)]

pub mod decompose;
pub mod error;
pub mod expert;
pub mod gating;
pub mod image;
pub mod metrics;
pub mod model_io;
pub mod noise;
pub mod par;
pub mod pipeline;

pub use error::{Error, Result};
