//! Label-free articulated skeleton fitting for human point-cloud sequences.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] holds the limb-local cylindrical coordinates every loss is built on.
//! * [`skeleton`] holds the data model: topology, poses, point clouds, soft assignments.
//! * [`losses`] evaluates the unsupervised and supervised loss terms.
//! * [`grad`] differentiates the pose-dependent objective; [`optim`] runs Adam over it.
//! * [`synth`] generates ray-cast capsule-body sequences with exact ground truth.
//! * [`segmentation`] builds label-free part assignments from k-means clusters.
//! * [`flow`] supplies per-point scene flow.
//! * [`eval`] implements MPJPE, Hungarian matching and the perturbation-recovery harness.
//! * [`io`] reads and writes the on-disk dataset formats.

// `!(x > y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod flow;
pub mod geometry;
pub mod grad;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod optim;
pub mod segmentation;
pub mod skeleton;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{LimbCoords, Vec3};
pub use losses::{LossBreakdown, LossConfig};
pub use skeleton::{Limb, LimbAttachment, PointCloud, SkeletonPose, SkeletonTopology, SoftAssignment};
