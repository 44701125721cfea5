//! Volumetric brain-tumor segmentation toolkit.
//!
//! * [`volume`]: dense 3D volumes, cropping, normalization and resampling.
//! * [`dataset`]: NIfTI and `VOL1` I/O, case discovery, splitting, synthetic cases.
//! * [`detect`]: slice-wise tumor detection and tumor-centred cropping.
//! * [`autodiff`]: reverse-mode differentiation, dice loss, Adam, gradient checks.
//! * [`unet`]: the attention-gated 3D U-Net, its trainer and checkpoints.
//! * [`metrics`]: confusion counts, overlap metrics and WT/TC/ET reports.

pub mod autodiff;
pub mod dataset;
pub mod detect;
mod interp;
pub mod metrics;
pub mod tensor;
pub mod unet;
pub mod volume;

pub use tensor::{Scalar, ShapeError, Tensor};
