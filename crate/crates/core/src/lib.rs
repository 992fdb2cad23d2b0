//! CorrNet: keypoint detection and local description learned by contrastive
//! training under spatial constraints.
//!
//! The pipeline has three stages:
//!
//! - [`trainer`] fits a siamese [`model::Model`] with the NT-Xent objective
//!   ([`loss`]) on crop pairs drawn by the spatially constrained samplers in
//!   [`data`].
//! - [`detector`] finds keypoints on an image pair by cross-modulating the
//!   two images' feature maps, picking the most activated common latent
//!   neuron, and combining guided backpropagation with a grad-CAM mask.
//! - [`descriptor`] describes keypoint-centred patches with a fine-tuned
//!   weight set, matches them by cosine similarity and fits a homography.
//!
//! [`evaluation`] scores detections and homographies on HPatches-layout
//! benchmark directories.

pub mod data;
pub mod descriptor;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{Homography, Point2, Rect};
