//! Desk-scale continual panoptic segmentation lab.
//!
//! A query-based mask-classification segmenter trained over a sequence of
//! class-incremental steps, with per-class query refinement adapters, a
//! half-distillation classification loss and importance-weighted query
//! distillation.

pub mod autodiff;
pub mod checkpoint;
pub mod datagen;
pub mod domain;
pub mod error;
pub mod importance;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod pseudo;
pub mod tensor;

pub use domain::{ClassId, ImageSample, Mask, ModelOutput, SegmentLabel};
pub use error::{LabError, Result};
pub use tensor::Matrix;
