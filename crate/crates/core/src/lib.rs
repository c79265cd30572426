//! Differentiable weighted GICP registration, learned point weighting and
//! lidar odometry evaluation.

pub mod autodiff;
pub mod covariance;
pub mod geometry;
pub mod gradcheck;
pub mod io_kitti;
pub mod knn;
pub mod lie;
pub mod odometry;
pub mod registration;
pub mod synthetic;
pub mod weights;

pub use geometry::{Point3, PointCloud, RigidTransform, Twist};
