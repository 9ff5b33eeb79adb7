//! Interaction-aware, DETR-style multi-person human mesh recovery decoder.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense matrices, masked softmax, layer norm, linear layers.
//! - [`body_model`]: parametric body mesh via blend shapes and linear blend skinning.
//! - [`camera`]: weak-perspective projection, depth conversion, box derivation.
//! - [`metrics`]: MPJPE, PA-MPJPE, PVE, 3D-PCK and GIoU.
//! - [`matching`]: set-prediction matching costs and optimal assignment.
//! - [`interaction`]: synthetic interaction-feature and object-box providers.
//! - [`decoder`]: the decoder layer with interaction encoding and query refinement.
//! - [`person`]: per-person parameters with derived joints, keypoints and boxes.
//! - [`losses`]: training-loss terms evaluated over matched pairs.
//! - [`pipeline`]: scene generation, end-to-end forward, evaluation and self-test.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod body_model;
pub mod camera;
pub mod decoder;
pub mod error;
pub mod interaction;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod numerics;
pub mod person;
pub mod pipeline;

pub use error::{Error, Result};
