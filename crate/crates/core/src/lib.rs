//! Dilated-convolution encoder-decoder segmentation network built on a small
//! from-scratch tensor library.
//!
//! * [`tensor`]: dense N,C,H,W tensors, kernels and reverse-mode autodiff.
//! * [`model`]: layers, the assembled network and weight files.
//! * [`training`]: losses, Adam, schedules, augmentation and the training loop.
//! * [`data`]: synthetic datasets, PPM/PGM IO, resizing and splits.
//! * [`metrics`]: segmentation metrics, parameter/MAC counting and throughput.
//! * [`explain`]: bottleneck heatmaps and overlays.
//! * [`gradsuite`]: finite-difference gradient suites.

pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Graph, NodeId, Scalar, Shape, Tensor};
