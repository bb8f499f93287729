//! Volumetric CNN engine and classification pipeline for three-sequence
//! prostate MRI volumes (T2W, ADC, DWI stacked as channels).
//!
//! Layers carry their own exact backward passes; models are sequences of
//! layers and residual blocks; the pipeline covers label derivation,
//! splitting, augmentation, weighted training and ranking metrics.

// Range checks are written `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Rng, Scalar, Tensor};
