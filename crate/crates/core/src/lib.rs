//! Multimodal-redundancy RGB-D detection and segmentation at desk scale.
//!
//! The crate is organised around the data flow of the system:
//!
//! - [`synthdata`]: seeded synthetic RGB-D bin scenes and depth preprocessing.
//! - [`fusion`]: multi-scale soft-gate fusion of per-modality feature pyramids.
//! - [`model`]: toy backbones, dense head, instance decoding and checkpoints.
//! - [`training`]: standard and dynamic-ensemble (modality dropout) training.
//! - [`mcscore`]: the label-free multimodal consistency score.
//! - [`harness`]: AP evaluation, ablations, gate analysis and reports.
//!
//! All numerics run in `f64` so gradients can be checked against central
//! finite differences.

pub mod error;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod imageio;
pub mod mcscore;
pub mod model;
pub mod nn;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{BoxPx, Rle};
pub use model::{Detection, DetectionSet, ModalityCondition, ModelParams};
pub use tensor::Tensor;
