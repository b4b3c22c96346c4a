//! Pseudo-label mining for object detection with vision-and-language scoring.
//!
//! The crate covers the full desk-scale pipeline: class-agnostic proposal
//! generation, iterative box refinement, region classification against an
//! open vocabulary, score fusion, thresholding and NMS into pseudo labels,
//! detection losses over mixed labeled/unlabeled data, and COCO-style
//! evaluation. Synthetic scenes with closed-form oracle backends stand in
//! for real images and real vision-language models, so every stage can be
//! exercised and measured deterministically.
//!
//! Core math is generic over the scalar type via [`Scalar`]; `f64` is the
//! default everywhere and the `*32` aliases at the crate root pin the `f32`
//! variants.

// Negated float comparisons like `!(x > 0)` are deliberate: they route
// NaN into the rejecting branch, which `x <= 0` would not.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod input;
pub mod labelspace;
pub mod losses;
pub mod miner;
pub mod proposals;
pub mod scalar;
pub mod scoring;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{expand_box, iou, nms, BBox, ImageExtent, ScoredBox};
pub use input::ImageInput;
pub use labelspace::{BackgroundMode, Category, LabelSpace};
pub use miner::{MinerConfig, PlSource, PseudoLabel};
pub use scalar::Scalar;
pub use scoring::OracleEmbedder;
pub use synthetic::SyntheticScene;

/// COCO-style integer image identifier.
pub type ImageId = i64;
/// COCO-style integer category identifier.
pub type CategoryId = i64;

pub type BBox32 = BBox<f32>;
pub type BBox64 = BBox<f64>;
pub type ScoredBox32 = ScoredBox<f32>;
pub type ScoredBox64 = ScoredBox<f64>;
pub type Proposal32 = proposals::Proposal<f32>;
pub type Proposal64 = proposals::Proposal<f64>;
pub type PseudoLabel32 = PseudoLabel<f32>;
pub type PseudoLabel64 = PseudoLabel<f64>;
