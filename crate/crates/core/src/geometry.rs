//! Points, point clouds, rigid transforms and voxel-grid downsampling.
//!
//! Everything here is a plain value type in 64-bit precision. Rigid
//! transforms compose left to right as matrices do: `(a * b).apply(p)` is
//! `a.apply(b.apply(p))`.

use std::collections::HashMap;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("weight {index} = {value} is outside [0, 1]")]
    WeightRange { index: usize, value: f64 },
    #[error("covariance {index} is not symmetric positive semi-definite")]
    InvalidCovariance { index: usize },
    #[error("rotation is not orthonormal with determinant +1")]
    NonRotation,
    #[error("rotation angle {angle} is too close to pi for the logarithm")]
    AngleNearPi { angle: f64 },
    #[error("voxel size must be positive, got {0}")]
    NonPositiveVoxel(f64),
}

/// An ordered set of points with optional per-point covariances and weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3>,
    covariances: Option<Vec<Mat3>>,
    weights: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self, GeometryError> {
        if let Some(index) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinite { index });
        }
        Ok(Self {
            points,
            covariances: None,
            weights: None,
        })
    }

    pub fn from_xyz<I: IntoIterator<Item = [f64; 3]>>(xyz: I) -> Result<Self, GeometryError> {
        Self::new(xyz.into_iter().map(|[x, y, z]| Point3::new(x, y, z)).collect())
    }

    pub fn with_covariances(mut self, covariances: Vec<Mat3>) -> Result<Self, GeometryError> {
        if covariances.len() != self.points.len() {
            return Err(GeometryError::LengthMismatch {
                what: "covariances",
                got: covariances.len(),
                expected: self.points.len(),
            });
        }
        for (index, c) in covariances.iter().enumerate() {
            if !is_symmetric_psd(c) {
                return Err(GeometryError::InvalidCovariance { index });
            }
        }
        self.covariances = Some(covariances);
        Ok(self)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self, GeometryError> {
        if weights.len() != self.points.len() {
            return Err(GeometryError::LengthMismatch {
                what: "weights",
                got: weights.len(),
                expected: self.points.len(),
            });
        }
        if let Some((index, &value)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(0.0..=1.0).contains(*w))
        {
            return Err(GeometryError::WeightRange { index, value });
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn without_weights(mut self) -> Self {
        self.weights = None;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn covariances(&self) -> Option<&[Mat3]> {
        self.covariances.as_deref()
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Weight of point `i`, 1.0 when the cloud carries no weights.
    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// Keeps the points at `indices` (in the given order) with their attributes.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            covariances: self
                .covariances
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            weights: self
                .weights
                .as_ref()
                .map(|w| indices.iter().map(|&i| w[i]).collect()),
        }
    }

    /// Concatenates two clouds. Attributes survive only when both carry them.
    pub fn concat(&self, other: &Self) -> Self {
        let join = |a: Option<&Vec<Mat3>>, b: Option<&Vec<Mat3>>| match (a, b) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Self {
            points: self.points.iter().chain(&other.points).copied().collect(),
            covariances: join(self.covariances.as_ref(), other.covariances.as_ref()),
            weights: match (&self.weights, &other.weights) {
                (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
                _ => None,
            },
        }
    }

    /// Applies `t` to every point and conjugates every covariance by its rotation.
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        let r = t.rotation();
        Self {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            covariances: self
                .covariances
                .as_ref()
                .map(|c| c.iter().map(|c| r * c * r.transpose()).collect()),
            weights: self.weights.clone(),
        }
    }
}

fn is_symmetric_psd(c: &Mat3) -> bool {
    if !c.iter().all(|v| v.is_finite()) {
        return false;
    }
    let scale = c.abs().max().max(1.0);
    if (c - c.transpose()).abs().max() > 1e-9 * scale {
        return false;
    }
    let eig = c.symmetric_eigen();
    eig.eigenvalues.iter().all(|&l| l >= -1e-9 * scale)
}

/// A rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotations that are not orthonormal with
    /// determinant +1 within 1e-9.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        if !is_rotation(&rotation, ORTHONORMAL_TOL) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonRotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Trusted constructor for rotations already known to be orthonormal.
    pub(crate) fn from_parts(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// Rotation by `angle` radians about the (normalized) `axis`.
    pub fn from_axis_angle(axis: &Vec3, angle: f64, translation: Vec3) -> Self {
        let rot = Twist::new(axis.normalize() * angle, Vec3::zeros()).exp().rotation;
        Self {
            rotation: rot,
            translation,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle in radians, in [0, pi].
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Logarithm map. Fails within 1e-6 of the cut locus at pi.
    pub fn log(&self) -> Result<Twist, GeometryError> {
        let r = &self.rotation;
        let vee = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        let s = 0.5 * vee.norm();
        let c = 0.5 * (r.trace() - 1.0);
        let theta = s.atan2(c);
        if theta > std::f64::consts::PI - 1e-6 {
            return Err(GeometryError::AngleNearPi { angle: theta });
        }
        let theta2 = theta * theta;
        // theta / (2 sin theta)
        let half_over_sinc = if theta2 < 1e-8 {
            0.5 * (1.0 + theta2 / 6.0 + 7.0 * theta2 * theta2 / 360.0)
        } else {
            0.5 * theta / s
        };
        let rot = vee * half_over_sinc;
        let w = skew(&rot);
        // coefficient of [w]^2 in the inverse left Jacobian
        let coeff = if theta2 < 1e-2 {
            1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0 + theta2 * theta2 * theta2 / 1209600.0
        } else {
            let half = (0.5 * theta).sin();
            (1.0 - theta * s / (4.0 * half * half)) / theta2
        };
        let v_inv = Mat3::identity() - 0.5 * w + coeff * w * w;
        Ok(Twist {
            rot_vec: rot,
            trans_vec: v_inv * self.translation,
        })
    }

    /// Projects the rotation block back onto SO(3) (nearest rotation in the
    /// Frobenius sense).
    pub fn orthonormalized(rotation: &Mat3, translation: Vec3) -> Self {
        Self {
            rotation: nearest_rotation(rotation),
            translation,
        }
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: Self) -> Self {
        self.compose(&rhs)
    }
}

impl Mul for &RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: Self) -> RigidTransform {
        self.compose(rhs)
    }
}

pub(crate) fn is_rotation(r: &Mat3, tol: f64) -> bool {
    r.iter().all(|v| v.is_finite())
        && (r.transpose() * r - Mat3::identity()).abs().max() <= tol
        && (r.determinant() - 1.0).abs() <= tol
}

pub(crate) fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

pub(crate) fn rotation_angle(r: &Mat3) -> f64 {
    let vee = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    (0.5 * vee.norm()).atan2(0.5 * (r.trace() - 1.0))
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Tangent vector of SE(3): rotation part first, then translation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub rot_vec: Vec3,
    pub trans_vec: Vec3,
}

impl Twist {
    pub fn new(rot_vec: Vec3, trans_vec: Vec3) -> Self {
        Self { rot_vec, trans_vec }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Self {
            rot_vec: Vec3::new(v[0], v[1], v[2]),
            trans_vec: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.rot_vec.x,
            self.rot_vec.y,
            self.rot_vec.z,
            self.trans_vec.x,
            self.trans_vec.y,
            self.trans_vec.z,
        ]
    }

    pub fn norm(&self) -> f64 {
        (self.rot_vec.norm_squared() + self.trans_vec.norm_squared()).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rot_vec: self.rot_vec * s,
            trans_vec: self.trans_vec * s,
        }
    }

    /// Exponential map: Rodrigues for the rotation, left Jacobian for the
    /// translation.
    pub fn exp(&self) -> RigidTransform {
        let theta2 = self.rot_vec.norm_squared();
        let (a, b, c) = if theta2 < 1e-8 {
            (
                1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
                0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
                1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
            )
        } else {
            let theta = theta2.sqrt();
            let (s, co) = theta.sin_cos();
            (s / theta, (1.0 - co) / theta2, (theta - s) / (theta2 * theta))
        };
        let w = skew(&self.rot_vec);
        let w2 = w * w;
        let rotation = Mat3::identity() + a * w + b * w2;
        let v = Mat3::identity() + b * w + c * w2;
        RigidTransform {
            rotation,
            translation: v * self.trans_vec,
        }
    }
}

/// Averages the points falling in each occupied voxel. The voxel of a point
/// is `floor(coord / voxel_size)` per axis; the output is ordered by voxel
/// index so it does not depend on the input order. Weights, when present,
/// are averaged the same way; covariances are dropped since they no longer
/// describe the merged points.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud, GeometryError> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(GeometryError::NonPositiveVoxel(voxel_size));
    }
    #[derive(Default)]
    struct Acc {
        sum: Vec3,
        weight: f64,
        count: usize,
    }
    let mut voxels: HashMap<(i64, i64, i64), Acc> = HashMap::new();
    for (i, p) in cloud.points().iter().enumerate() {
        let key = (
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        );
        let acc = voxels.entry(key).or_default();
        acc.sum += p.coords;
        acc.weight += cloud.weight(i);
        acc.count += 1;
    }
    let mut cells: Vec<_> = voxels.into_iter().collect();
    cells.sort_unstable_by_key(|(k, _)| *k);
    let n = |acc: &Acc| acc.count as f64;
    let points = cells.iter().map(|(_, a)| Point3::from(a.sum / n(a))).collect();
    let out = PointCloud::new(points)?;
    if cloud.weights().is_some() {
        let w = cells.iter().map(|(_, a)| (a.weight / n(a)).clamp(0.0, 1.0)).collect();
        out.with_weights(w)
    } else {
        Ok(out)
    }
}
