//! SE(3) arithmetic generic over [`Real`], used by the differentiable solver.
//!
//! Matrices are row-major `[S; 9]`. The `f64` instantiation agrees with
//! [`RigidTransform`] and [`Twist::exp`] to rounding.

use crate::autodiff::Real;
use crate::geometry::{Mat3, RigidTransform, Twist, Vec3};

#[derive(Debug, Clone, Copy)]
pub struct Pose<S> {
    pub rotation: [S; 9],
    pub translation: [S; 3],
}

pub fn skew<S: Real>(v: &[S; 3]) -> [S; 9] {
    let z = S::constant(0.0);
    [z, -v[2], v[1], v[2], z, -v[0], -v[1], v[0], z]
}

/// Transposed skew matrix, i.e. `skew(-v)`.
pub fn skew_t<S: Real>(v: &[S; 3]) -> [S; 9] {
    let z = S::constant(0.0);
    [z, v[2], -v[1], -v[2], z, v[0], v[1], -v[0], z]
}

pub fn transpose<S: Copy>(a: &[S; 9]) -> [S; 9] {
    [a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]]
}

impl<S: Real> Pose<S> {
    pub fn identity() -> Self {
        let o = S::constant(1.0);
        let z = S::constant(0.0);
        Self {
            rotation: [o, z, z, z, o, z, z, z, o],
            translation: [z, z, z],
        }
    }

    pub fn constant(t: &RigidTransform) -> Self {
        let r = t.rotation();
        let v = t.translation();
        Self {
            rotation: std::array::from_fn(|k| S::constant(r[(k / 3, k % 3)])),
            translation: std::array::from_fn(|k| S::constant(v[k])),
        }
    }

    pub fn value(&self) -> RigidTransform {
        let r = Mat3::from_fn(|i, j| self.rotation[3 * i + j].value());
        let t = Vec3::from_fn(|i, _| self.translation[i].value());
        RigidTransform::from_parts(r, t)
    }

    pub fn apply(&self, p: &[S; 3]) -> [S; 3] {
        let q = S::matvec3(&self.rotation, p);
        [q[0] + self.translation[0], q[1] + self.translation[1], q[2] + self.translation[2]]
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: S::matmul3(&self.rotation, &other.rotation),
            translation: self.apply(&other.translation),
        }
    }

    /// Entries of the top 3x4 block of the homogeneous matrix, row-major.
    pub fn entries(&self) -> [S; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [r[0], r[1], r[2], t[0], r[3], r[4], r[5], t[1], r[6], r[7], r[8], t[2]]
    }
}

/// Exponential map of the twist `(rot, trans)`.
///
/// Below `theta^2 = 1e-4` the Rodrigues coefficients switch to their Taylor
/// series so the derivative stays finite at zero rotation.
pub fn exp<S: Real>(xi: &[S; 6]) -> Pose<S> {
    let w = [xi[0], xi[1], xi[2]];
    let u = [xi[3], xi[4], xi[5]];
    let theta2 = S::dot(&w, &w);
    let (a, b, c) = if theta2.value() < 1e-4 {
        let t4 = theta2 * theta2;
        let t6 = t4 * theta2;
        (
            S::constant(1.0) - theta2 / 6.0 + t4 / 120.0 - t6 / 5040.0,
            S::constant(0.5) - theta2 / 24.0 + t4 / 720.0 - t6 / 40320.0,
            S::constant(1.0 / 6.0) - theta2 / 120.0 + t4 / 5040.0 - t6 / 362880.0,
        )
    } else {
        let theta = theta2.sqrt().expect("nonnegative");
        let (s, co) = (theta.sin(), theta.cos());
        (s / theta, (S::constant(1.0) - co) / theta2, (theta - s) / (theta2 * theta))
    };
    // W^2 = w w^T - theta^2 I
    let w2: [S; 9] = std::array::from_fn(|k| {
        let (i, j) = (k / 3, k % 3);
        let outer = w[i] * w[j];
        if i == j {
            outer - theta2
        } else {
            outer
        }
    });
    let wk = skew(&w);
    let rotation: [S; 9] = std::array::from_fn(|k| {
        let m = wk[k] * a + w2[k] * b;
        if k % 4 == 0 {
            m + 1.0
        } else {
            m
        }
    });
    let v: [S; 9] = std::array::from_fn(|k| {
        let m = wk[k] * b + w2[k] * c;
        if k % 4 == 0 {
            m + 1.0
        } else {
            m
        }
    });
    Pose {
        rotation,
        translation: S::matvec3(&v, &u),
    }
}

/// Frobenius norm of the difference of the 4x4 homogeneous matrices.
pub fn frobenius_distance<S: Real>(est: &Pose<S>, gt: &RigidTransform) -> S {
    let g = Pose::<f64>::constant(gt).entries();
    let diff: Vec<S> = est.entries().iter().zip(g).map(|(&e, g)| e - g).collect();
    S::norm2(&diff)
}

pub fn twist_value<S: Real>(xi: &[S; 6]) -> Twist {
    Twist::from_slice(&std::array::from_fn(|k| xi[k].value()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frob(a: &RigidTransform, b: &RigidTransform) -> f64 {
        (a.to_matrix() - b.to_matrix()).norm()
    }

    #[test]
    fn matches_geometry_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 0..200 {
            let scale = if k % 2 == 0 { 1.0 } else { 1e-3 };
            let xi: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0) * scale);
            let ours = exp(&xi).value();
            let reference = Twist::from_slice(&xi).exp();
            assert!(frob(&ours, &reference) < 1e-12);
        }
    }

    #[test]
    fn compose_and_entries() {
        let a = RigidTransform::from_axis_angle(&Vec3::z(), 0.3, Vec3::new(1.0, 2.0, 3.0));
        let b = RigidTransform::from_axis_angle(&Vec3::x(), -0.7, Vec3::new(0.0, 1.0, 0.0));
        let c = Pose::<f64>::constant(&a).compose(&Pose::constant(&b)).value();
        assert!(frob(&c, &a.compose(&b)) < 1e-14);
        let e = Pose::<f64>::constant(&a).entries();
        assert_eq!(e[3], 1.0);
        assert_eq!(e[11], 3.0);
    }

    #[test]
    fn exp_derivative_continuous_across_series_switch() {
        // d R_01 / d w_z at w = (0, 0, s) equals -cos(s) on both sides of the switch
        for s in [0.99e-2, 1.01e-2, 0.0] {
            let tape = Tape::new();
            let v = tape.vars(&[0.0, 0.0, s, 0.0, 0.0, 0.0]);
            let xi: [_; 6] = v.clone().try_into().unwrap();
            let p = exp(&xi);
            let g = tape.backward(p.rotation[1]).wrt(v[2]);
            assert!((g + s.cos()).abs() < 1e-10, "{s}: {g}");
        }
    }
}
