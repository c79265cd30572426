//! Seeded synthetic scenes, registration pairs and sequences.
//!
//! Scenes are built from a ground plane, two non-parallel walls and a box so
//! every rigid degree of freedom is observable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::covariance::{estimate_covariances, CovarianceError, CovarianceParams};
use crate::geometry::{Point3, PointCloud, RigidTransform, Vec3};

/// Height below which every static scene point lies.
pub const STATIC_CEILING: f64 = 2.0;

/// Random transform with rotation angle in `[0, max_angle]` about a uniform
/// axis and translation of length in `[0, max_translation]`.
pub fn random_transform(rng: &mut impl Rng, max_angle: f64, max_translation: f64) -> RigidTransform {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.gen_range(0.0..=max_angle);
    let len = rng.gen_range(0.0..=max_translation);
    RigidTransform::from_axis_angle(&Vec3::from(axis), angle, Vec3::from(dir) * len)
}

/// Placement of the walls and the box of a structured scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneLayout {
    pub extent: f64,
    yaw_a: f64,
    yaw_b: f64,
    box_centre: Vec3,
    box_half: Vec3,
}

impl SceneLayout {
    /// Scene spanning roughly `[-extent, extent]^2` horizontally and
    /// `[0, STATIC_CEILING]` vertically.
    pub fn random(rng: &mut impl Rng, extent: f64) -> Self {
        Self {
            extent,
            yaw_a: rng.gen_range(-0.4..0.4),
            yaw_b: rng.gen_range(-0.4..0.4) + std::f64::consts::FRAC_PI_2,
            box_centre: Vec3::new(rng.gen_range(-0.4..0.4) * extent, rng.gen_range(-0.4..0.4) * extent, 0.0),
            box_half: Vec3::new(0.12 * extent, 0.08 * extent, 0.6),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Vec<Point3> {
        let e = self.extent;
        (0..n)
            .map(|_| {
                let part: f64 = rng.gen();
                let s = rng.gen_range(-e..e);
                let h = rng.gen_range(0.0..STATIC_CEILING);
                if part < 0.4 {
                    Point3::new(rng.gen_range(-e..e), s, 0.02 * s)
                } else if part < 0.6 {
                    let (c, sn) = (self.yaw_a.cos(), self.yaw_a.sin());
                    Point3::new(e * 0.9 * c - s * sn, e * 0.9 * sn + s * c, h)
                } else if part < 0.8 {
                    let (c, sn) = (self.yaw_b.cos(), self.yaw_b.sin());
                    Point3::new(e * 0.8 * c - s * sn, e * 0.8 * sn + s * c, h)
                } else {
                    let u = rng.gen_range(-1.0..1.0);
                    let v = rng.gen_range(-1.0..1.0);
                    let local = match rng.gen_range(0..5) {
                        0 => Vec3::new(1.0, u, v),
                        1 => Vec3::new(-1.0, u, v),
                        2 => Vec3::new(u, 1.0, v),
                        3 => Vec3::new(u, -1.0, v),
                        _ => Vec3::new(u, v, 1.0),
                    };
                    let z = Vec3::new(0.0, 0.0, self.box_half.z);
                    Point3::from(self.box_centre + local.component_mul(&self.box_half) + z)
                }
            })
            .collect()
    }
}

/// `n` points on a freshly laid out structured scene.
pub fn structured_scene(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<Point3> {
    SceneLayout::random(rng, extent).sample(rng, n)
}

fn noisy(rng: &mut impl Rng, p: Point3, sigma: f64) -> Point3 {
    if sigma == 0.0 {
        return p;
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Point3::new(p.x + normal.sample(rng), p.y + normal.sample(rng), p.z + normal.sample(rng))
}

/// Registration pair: `gt` maps source coordinates into the target frame.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt: RigidTransform,
    pub source_outliers: Vec<bool>,
    pub target_outliers: Vec<bool>,
}

impl SyntheticPair {
    pub fn with_covariances(mut self, params: &CovarianceParams) -> Result<Self, CovarianceError> {
        self.source = estimate_covariances(&self.source, params)?;
        self.target = estimate_covariances(&self.target, params)?;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairParams {
    pub points: usize,
    pub extent: f64,
    pub max_angle: f64,
    pub max_translation: f64,
    pub noise: f64,
}

impl Default for PairParams {
    fn default() -> Self {
        Self {
            points: 1000,
            extent: 5.0,
            max_angle: 15f64.to_radians(),
            max_translation: 0.5,
            noise: 0.01,
        }
    }
}

/// Both clouds see the same scene points, each with independent noise.
pub fn rigid_pair(seed: u64, params: &PairParams) -> SyntheticPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = structured_scene(&mut rng, params.points, params.extent);
    let gt = random_transform(&mut rng, params.max_angle, params.max_translation);
    let inv = gt.inverse();
    let target: Vec<Point3> = scene.iter().map(|&p| noisy(&mut rng, p, params.noise)).collect();
    let source: Vec<Point3> = scene.iter().map(|p| noisy(&mut rng, inv.apply(p), params.noise)).collect();
    SyntheticPair {
        source: PointCloud::new(source).expect("finite"),
        target: PointCloud::new(target).expect("finite"),
        gt,
        source_outliers: vec![false; params.points],
        target_outliers: vec![false; params.points],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierParams {
    pub points: usize,
    pub outlier_fraction: f64,
    pub extent: f64,
    pub max_angle: f64,
    pub max_translation: f64,
    pub noise: f64,
    /// Extra horizontal displacement of the moving object between frames.
    pub object_motion: (f64, f64),
    /// Draw fresh static points for each frame instead of reusing them.
    pub resample: bool,
}

impl Default for OutlierParams {
    fn default() -> Self {
        Self {
            points: 100,
            outlier_fraction: 0.15,
            extent: 4.0,
            max_angle: 5f64.to_radians(),
            max_translation: 0.3,
            noise: 0.01,
            object_motion: (0.3, 0.5),
            resample: false,
        }
    }
}

/// Pair over one static scene that also contains an elevated object that moves by its own transform between the
/// frames, so its points are inconsistent with `gt`.
pub fn outlier_pair(seed: u64, params: &OutlierParams) -> SyntheticPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_out = (params.outlier_fraction * params.points as f64).round() as usize;
    let n_in = params.points - n_out;
    let extent = params.extent;
    let layout = SceneLayout::random(&mut rng, extent);
    let gt = random_transform(&mut rng, params.max_angle, params.max_translation);
    let centre = Vec3::new(
        rng.gen_range(-0.5..0.5) * extent,
        rng.gen_range(-0.5..0.5) * extent,
        STATIC_CEILING + rng.gen_range(0.8..1.2),
    );
    let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let dist = rng.gen_range(params.object_motion.0..params.object_motion.1);
    let yaw = rng.gen_range(-0.3..0.3);
    let object_motion = RigidTransform::from_axis_angle(&Vec3::z(), yaw, Vec3::new(heading.cos(), heading.sin(), 0.0) * dist);
    let half = Vec3::new(0.4, 0.3, 0.25);

    let object = |rng: &mut ChaCha8Rng| -> Vec<Point3> {
        (0..n_out)
            .map(|_| {
                // surface of a box, so its covariances are planar like the scene's
                let mut local = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                local[rng.gen_range(0..3)] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                Point3::from(Vec3::from(local).component_mul(&half))
            })
            .collect()
    };
    let statics = layout.sample(&mut rng, n_in);
    let shape = object(&mut rng);
    let frame = |rng: &mut ChaCha8Rng, to_frame: &RigidTransform, moved: bool| {
        let (base, obj) = if params.resample {
            (layout.sample(rng, n_in), object(rng))
        } else {
            (statics.clone(), shape.clone())
        };
        let mut pts: Vec<Point3> = base.iter().map(|p| noisy(rng, to_frame.apply(p), params.noise)).collect();
        for p in obj {
            let p = if moved { object_motion.apply(&p) } else { p };
            let p = Point3::from(p.coords + centre);
            pts.push(noisy(rng, to_frame.apply(&p), params.noise));
        }
        pts
    };
    let target = frame(&mut rng, &RigidTransform::identity(), false);
    let source = frame(&mut rng, &gt.inverse(), true);
    let mask: Vec<bool> = (0..params.points).map(|i| i >= n_in).collect();
    SyntheticPair {
        source: PointCloud::new(source).expect("finite"),
        target: PointCloud::new(target).expect("finite"),
        gt,
        source_outliers: mask.clone(),
        target_outliers: mask,
    }
}

/// Constant-motion sequence over a fixed world cloud: `poses[t]` maps frame t
/// into frame 0 and `scans[t]` holds the world points in frame t.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub scans: Vec<PointCloud>,
    pub poses: Vec<RigidTransform>,
}

pub fn constant_motion_sequence(seed: u64, frames: usize, points: usize, step: &RigidTransform, noise: f64) -> SyntheticSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = structured_scene(&mut rng, points, 12.0);
    let mut poses = Vec::with_capacity(frames);
    let mut pose = RigidTransform::identity();
    for _ in 0..frames {
        poses.push(pose.clone());
        pose = pose.compose(step);
    }
    let scans = poses
        .iter()
        .map(|p| {
            let inv = p.inverse();
            PointCloud::new(world.iter().map(|w| noisy(&mut rng, inv.apply(w), noise)).collect()).expect("finite")
        })
        .collect();
    SyntheticSequence { scans, poses }
}
