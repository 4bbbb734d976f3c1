//! Whole-brain fMRI state decoding.
//!
//! The crate covers the full pipeline: voxel-level signal preprocessing,
//! volume I/O (minimal NIfTI-1 plus an internal dataset format and a
//! synthetic generator), a slice-sequence convolutional/recurrent decoder
//! built on an in-crate autodiff tensor core, mini-batch training, and an
//! experiment harness for multi-task pretraining and pretrained-vs-scratch
//! transfer comparisons with paired significance tests.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod nifti;
pub mod signal;
pub mod stats;
pub mod volume;
pub mod error;
pub mod experiment;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
