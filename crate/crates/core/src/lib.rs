//! Core algorithms for distributed multi-robot SLAM with imaging sonar.
//!
//! Every robot keeps its own SE(2) pose graph, summarizes keyframes with a
//! small range-histogram descriptor and only exchanges point clouds when a
//! descriptor match suggests an inter-robot loop closure. This crate holds the
//! pure parts of that pipeline and builds without `std`:
//!
//! - [`geometry`]: SE(2) poses, sonar projection, point clouds
//! - [`frontend`]: CA-CFAR detection and medoid voxel downsampling
//! - [`codec`]: 8-bit voxel cloud compression and its wire layout
//! - [`place`]: range-histogram descriptors, scene images, k-d tree search
//! - [`registration`]: ICP and lattice-initialized global registration
//! - [`robust`]: the outlier-rejection cascade and PCM
//! - [`graph`]: factor graph and Levenberg-Marquardt solver
//! - [`comms`]: bit-exact messages, broadcast channel and utilization metering
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod codec;
pub mod comms;
pub mod frontend;
pub mod geometry;
pub mod graph;
pub mod kdtree;
pub mod linalg;
pub mod math;
pub mod place;
pub mod registration;
pub mod robust;
mod sparse;

pub use geometry::{Key, KeyframeId, Point2, PointCloud2D, Pose2, RobotId};
