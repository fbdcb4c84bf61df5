//! A small two-stage object detector built from scratch.
//!
//! The pipeline follows the classic propose-then-classify design: a
//! convolutional backbone produces a feature map, a region proposal network
//! scores and refines a grid of anchors, RoI pooling crops each proposal to a
//! fixed-size feature, and a softmax head assigns a class and a refined box.
//! Everything, including reverse-mode differentiation, is implemented in
//! this crate on `f64` buffers.

pub mod cli;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
