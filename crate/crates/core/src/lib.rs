//! Weakly supervised LiDAR segmentation with a prototype memory bank,
//! entropy-driven anchor sampling and pixel-to-prototype contrastive loss.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchor;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod knn;
pub mod losses;
pub mod pointcloud;
pub mod projection;
pub mod prototype;
pub mod rng;
pub mod synthetic;
pub mod training;
pub mod weak;

pub use error::{Error, Result};
pub use pointcloud::{ClassId, PointCloud, UNLABELLED};
