//! Semantic scene completion from a single RGB-D view.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] – dense 64-bit tensors, a recording tape with reverse-mode
//!   gradients, finite-difference checking, SGD and checkpoints.
//! * [`geometry`] – pinhole camera, HHA encoding, the synthetic indoor scene
//!   generator, voxel visibility and the pixel/voxel projection layer.
//! * [`net2d`] – the two-stream RGB/HHA segmentation network.
//! * [`net3d`] – the one-hot ROI guidance branch, residual attention blocks
//!   and the completion branch, fused multiplicatively.
//! * [`eval`] – losses, scene-completion metrics and the experiment harness.

pub mod config;
pub mod error;
pub mod eval;
pub mod export;
pub mod geometry;
pub mod net2d;
pub mod net3d;
pub mod tensor;

pub use error::{Error, Result};
