//! Differentiable segmentation-topology toolkit for OCT-like B-scans.
//!
//! Layer boundaries are regressed per A-scan, rectified into a strict
//! depth order, converted into soft or binarized layer masks, and used to
//! confine lesion predictions to their admissible layers. Every step is
//! differentiable, so anatomical priors can be trained end to end.

pub mod error;
pub mod gradsuite;
pub mod par;
pub mod render;
pub mod tensor;
pub mod losses;
pub mod model;
pub mod softadapt;
pub mod synth;
pub mod topology;
pub mod train;

pub use error::{Error, Result, TensorError};
pub use tensor::{Graph, Tensor, Var};
