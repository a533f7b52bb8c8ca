//! Foreground-attentive feature learning for person re-identification.
//!
//! The crate contains everything from dense tensors up to the training
//! loop: hand-derived layer gradients, the symmetric triplet and local
//! regression losses, the three-subnetwork model, data formats, a
//! synthetic dataset generator and CMC/mAP evaluation.

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod net;
pub mod tensor;
pub mod trainer;

pub use error::{FannError, Result};
pub use tensor::{Shape, Tensor};
