//! Reversed auto-encoder for unsupervised anomaly detection.
//!
//! Training sees only healthy images. The encoder and decoder play an
//! introspective game: the encoder learns to assign low evidence to the
//! decoder's own samples while a reversed multi-scale embedding loss ties the
//! encoder's feature pyramid on reconstructions back to the one on inputs.
//! At test time anomalies are scored by comparing an image against its
//! pseudo-healthy reconstruction with a contrast-equalized residual gated by
//! perceptual dissimilarity.

pub mod error;
pub mod rng;

mod tensor;
mod graph;
pub mod image;
pub mod model;
pub mod objectives;
pub mod clahe;
pub mod perceptual;
pub mod scoring;
pub mod metrics;
pub mod checkpoint;
pub mod trainer;
pub mod synth;
pub mod data;

pub use error::{RaError, Result};
pub use image::{Image, Mask};
pub use tensor::{Scalar, Tensor};
