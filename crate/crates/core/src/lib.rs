//! Preclinical Alzheimer's detection from structural MRI volumes.
//!
//! The crate covers the whole pipeline: reading raw volumes and clinical
//! manifests, labeling scan sessions from diagnosis timelines, person-disjoint
//! dataset preparation, three classifiers (a 3D CNN, a recurrent glimpse
//! network and a frame transformer) built on a small reverse-mode autodiff
//! engine, training/evaluation, and a synthetic cohort generator.

pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod labeling;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod scan_io;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
