//! LiDAR-visual-inertial odometry with hybrid feature / plane-centroid
//! tracking.
//!
//! Modules, bottom-up:
//!
//! * [`geometry`]: poses, pinhole projection, SO(3) helpers.
//! * [`plane_map`]: voxel map with incremental plane extraction.
//! * [`image_front`]: pyramids, Harris corners, pyramidal LK, RANSAC.
//! * [`depth_est`]: sliding-window feature depth estimation and track recovery.
//! * [`esikf_vis`]: error-state iterated Kalman filter with a hybrid visual update.
//! * [`harness`]: synthetic data, dataset I/O, the pipeline and evaluation.

pub mod depth_est;
pub mod esikf_vis;
pub mod geometry;
pub mod harness;
pub mod image_front;
pub mod plane_map;
pub mod util;
