//! Multimodal virtual points for Lidar-camera fusion.
//!
//! Sparse Lidar sweeps are densified with virtual points lifted from 2D
//! instance masks: each sampled mask pixel borrows the depth of its nearest
//! projected Lidar measurement and is unprojected back into 3D with the
//! detection's class and score attached.
//!
//! * [`geometry`] rigid transforms, pinhole projection and the Lidar-to-camera chain
//! * [`scene`] frame data model and the binary/PGM/JSON file formats
//! * [`virtual_points`] frustum building, mask sampling, nearest-depth lifting
//! * [`voxelizer`] split (and zero-padded baseline) voxel feature encoding
//! * [`simulator`] analytic ray-cast scenes with exact ground truth
//! * [`eval`] chamfer distance, masked-Lidar depth study, density report
//! * [`cli`] the `mvp` command line driver

pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod scene;
pub mod simulator;
pub mod util;
pub mod virtual_points;
pub mod voxelizer;

pub use error::{Error, Result};
