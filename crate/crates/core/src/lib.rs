//! Reference-based super-resolution engine.
//!
//! A low-resolution input is upscaled 2x with the help of a second,
//! higher-detail reference view of (part of) the same scene: dense patch
//! matching proposes correspondences, a lightweight alignment head refines
//! them with per-patch affine warps, and confidence-gated fusion merges the
//! aligned reference content into the reconstruction at several scales.
//! Everything is deterministic and CPU-only, with hand-wired analytic
//! backward passes verified against finite differences.

pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod layers;
pub mod losses;
pub mod matching;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod tensor;
pub mod warp;

pub use error::{CoreError, Result};
pub use image::Image;
pub use tensor::{GradPair, Tensor};
