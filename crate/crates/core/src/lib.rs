//! Superpixel transformer building blocks.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`ops`], [`gradcheck`]: a small dense tensor
//!   engine with reverse-mode differentiation.
//! * [`geometry`]: pixel/superpixel neighborhoods and windows.
//! * [`sca`]: superpixel cross attention.
//! * [`model`]: the full network, parameter accounting and checkpoints.
//! * [`slic`], [`evaluation`], [`training`]: the classical baseline, quality and
//!   robustness protocols, and desk-scale training.
//! * [`netpbm`]: PPM/PGM image I/O.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod netpbm;
pub mod ops;
pub mod params;
pub mod sca;
pub mod slic;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{CheckpointError, Error, Result};
pub use geometry::{Grid, GridSpec};
pub use tensor::{Scalar, Tensor};
