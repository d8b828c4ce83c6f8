//! Multimotion visual odometry: simultaneous segmentation and SE(3)
//! trajectory estimation of every rigid motion seen by a stereo camera.

pub mod camera;
pub mod config;
pub mod error;
pub mod io;
pub mod output;
pub mod estimation;
pub mod eval;
pub mod scalar;
pub mod scene;
pub mod se3;
pub mod segmentation;
pub mod sliding;
pub mod tracklet;

pub use error::{MvoError, Result};
pub use scalar::Real;

pub type Pose = se3::SE3<f64>;
pub type Pose32 = se3::SE3<f32>;
pub type Twist = nalgebra::Vector6<f64>;
pub type StereoCalib = camera::StereoCalibration<f64>;
pub type StereoObs = camera::StereoObservation<f64>;
