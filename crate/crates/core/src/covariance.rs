//! Per-point covariances from PCA over k-nearest neighborhoods.

use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{GeometryError, Mat3, Point3, PointCloud, Vec3};
use crate::knn::KdIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularization {
    /// Eigenvalues replaced by `(1, 1, plane_epsilon)`.
    PlaneRegularized,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceParams {
    pub k_neighbors: usize,
    pub plane_epsilon: f64,
    pub regularization: Regularization,
}

impl Default for CovarianceParams {
    fn default() -> Self {
        Self {
            k_neighbors: 20,
            plane_epsilon: 1e-3,
            regularization: Regularization::PlaneRegularized,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovarianceError {
    #[error("cloud has {points} points, need at least {needed}")]
    TooFewPoints { points: usize, needed: usize },
    #[error("k_neighbors must be at least 3, got {0}")]
    InvalidK(usize),
    #[error("plane_epsilon must lie in (0, 1), got {0}")]
    InvalidEpsilon(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl CovarianceParams {
    pub fn validate(&self) -> Result<(), CovarianceError> {
        if self.k_neighbors < 3 {
            return Err(CovarianceError::InvalidK(self.k_neighbors));
        }
        if !(self.plane_epsilon > 0.0 && self.plane_epsilon < 1.0) {
            return Err(CovarianceError::InvalidEpsilon(self.plane_epsilon));
        }
        Ok(())
    }
}

/// Unbiased sample covariance (divides by `n - 1`; zero for a single point).
pub fn sample_covariance(points: &[Point3]) -> Mat3 {
    let n = points.len();
    if n < 2 {
        return Mat3::zeros();
    }
    let mean = points.iter().fold(Vec3::zeros(), |acc, p| acc + p.coords) / n as f64;
    let mut c = Mat3::zeros();
    for p in points {
        let d = p.coords - mean;
        c += d * d.transpose();
    }
    c / (n - 1) as f64
}

/// `I - (1 - eps) n n^T` with `n` the eigenvector of the smallest eigenvalue.
pub fn plane_regularize(c: &Mat3, eps: f64) -> Mat3 {
    let eig = SymmetricEigen::new(*c);
    let (min_idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &v)| if v < best.1 { (i, v) } else { best });
    let n: Vec3 = eig.eigenvectors.column(min_idx).into_owned().normalize();
    let c = Mat3::identity() - (1.0 - eps) * n * n.transpose();
    // exact symmetry
    (c + c.transpose()) * 0.5
}

pub fn estimate_covariances(cloud: &PointCloud, params: &CovarianceParams) -> Result<PointCloud, CovarianceError> {
    params.validate()?;
    let n = cloud.len();
    if n < params.k_neighbors {
        return Err(CovarianceError::TooFewPoints {
            points: n,
            needed: params.k_neighbors,
        });
    }
    let index = KdIndex::build(cloud).expect("nonempty cloud");
    let pts = cloud.points();
    let covs: Vec<Mat3> = pts
        .par_iter()
        .map(|p| {
            let nb: Vec<Point3> = index
                .query(p, params.k_neighbors)
                .iter()
                .map(|nb| pts[nb.index])
                .collect();
            let c = sample_covariance(&nb);
            match params.regularization {
                Regularization::PlaneRegularized => plane_regularize(&c, params.plane_epsilon),
                Regularization::Raw => c,
            }
        })
        .collect();
    Ok(cloud.clone().with_covariances(covs)?)
}
