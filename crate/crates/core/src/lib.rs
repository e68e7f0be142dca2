//! Desk-scale self-supervised pre-training on colored point clouds.
//!
//! A point cloud is split into its two modalities — coordinates and RGB —
//! and both are pushed through one shared point-wise MLP (a Siamese pass).
//! Four losses supervise the pair of feature sets:
//!
//! * point-level InfoNCE between matched geometry/color features,
//! * swapped reconstruction (geometry features predict colors and vice versa),
//! * swapped cluster prediction against Sinkhorn equal-partition targets,
//! * object-level InfoNCE over high-confidence cluster mean features.
//!
//! Evaluation is fully unsupervised semantic segmentation: fused cluster
//! predictions are aligned to ground-truth labels with Hungarian matching
//! and scored by mIoU. Synthetic labeled scenes stand in for real datasets.

pub mod checkpoint;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod hungarian;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod scene;
pub mod sinkhorn;
pub mod trainer;

pub use error::{Error, Result};
