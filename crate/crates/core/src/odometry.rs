//! Frame-to-frame lidar odometry and KITTI relative-error metrics.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use thiserror::Error;

use crate::covariance::{estimate_covariances, CovarianceError, CovarianceParams};
use crate::geometry::{voxel_downsample, GeometryError, PointCloud, RigidTransform};
use crate::knn::DEFAULT_K_D;
use crate::registration::{align_gicp, align_icp_from, align_wgicp, LmParams, RegistrationError, WgicpProblem};
use crate::weights::{hard_reject, survivor_count, WeightModel, WeightsError};

/// Evaluation lengths in meters.
pub const KITTI_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Icp,
    Gicp,
    Wgicp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialGuess {
    Identity,
    /// Start each frame from the previous relative pose.
    ConstantVelocity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryConfig {
    pub voxel_size: f64,
    pub backend: Backend,
    pub rejection_ratio: f64,
    pub model_path: Option<PathBuf>,
    pub initial_guess: InitialGuess,
    pub covariance: CovarianceParams,
    pub k_d: usize,
    pub knn_temperature: f64,
    pub lm: LmParams,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.5,
            backend: Backend::Gicp,
            rejection_ratio: 0.0,
            model_path: None,
            initial_guess: InitialGuess::Identity,
            covariance: CovarianceParams::default(),
            k_d: DEFAULT_K_D,
            knn_temperature: 1.0,
            lm: LmParams::fast(),
        }
    }
}

#[derive(Debug, Error)]
pub enum OdometryError {
    #[error("voxel_size must be positive, got {0}")]
    InvalidVoxelSize(f64),
    #[error("rejection ratio must lie in [0, 1), got {0}")]
    InvalidRejection(f64),
    #[error("the weighted backend with rejection {0} needs a model")]
    MissingModel(f64),
    #[error("a sequence needs at least 2 scans, got {0}")]
    TooFewScans(usize),
    #[error("trajectory has {estimate} poses but ground truth has {truth}")]
    LengthMismatch { estimate: usize, truth: usize },
    #[error("ground truth path of {length:.1} m is shorter than the first evaluation length")]
    SequenceTooShort { length: f64 },
    #[error(transparent)]
    Model(#[from] WeightsError),
}

impl OdometryConfig {
    pub fn validate(&self) -> Result<(), OdometryError> {
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(OdometryError::InvalidVoxelSize(self.voxel_size));
        }
        if !(0.0..1.0).contains(&self.rejection_ratio) {
            return Err(OdometryError::InvalidRejection(self.rejection_ratio));
        }
        if self.backend == Backend::Wgicp && self.rejection_ratio > 0.0 && self.model_path.is_none() {
            return Err(OdometryError::MissingModel(self.rejection_ratio));
        }
        Ok(())
    }
}

/// Wall time of each phase of one frame, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FrameTiming {
    pub preprocess: f64,
    pub inference: f64,
    pub alignment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlaggedFrame {
    pub frame: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct OdometryRun {
    /// `relative_poses[t]` maps frame t into frame t-1; entry 0 is identity.
    pub relative_poses: Vec<RigidTransform>,
    /// Poses in the frame of scan 0.
    pub trajectory: Vec<RigidTransform>,
    pub timings: Vec<FrameTiming>,
    /// Frames whose pose fell back to identity.
    pub flagged: Vec<FlaggedFrame>,
    /// Points entering alignment and total downsampled points, per source
    /// frame (entry 0 unused).
    pub survivors: Vec<(usize, usize)>,
}

impl OdometryRun {
    /// Mean `100 * kept / total` over aligned frames.
    pub fn surviving_percent(&self) -> f64 {
        let frames: Vec<f64> = self
            .survivors
            .iter()
            .skip(1)
            .filter(|(_, n)| *n > 0)
            .map(|&(k, n)| 100.0 * k as f64 / n as f64)
            .collect();
        if frames.is_empty() {
            return f64::NAN;
        }
        frames.iter().sum::<f64>() / frames.len() as f64
    }

    pub fn mean_timing(&self) -> FrameTiming {
        let aligned = &self.timings[1.min(self.timings.len())..];
        let n = aligned.len().max(1) as f64;
        let sum = aligned.iter().fold(FrameTiming::default(), |a, t| FrameTiming {
            preprocess: a.preprocess + t.preprocess,
            inference: a.inference + t.inference,
            alignment: a.alignment + t.alignment,
        });
        FrameTiming {
            preprocess: sum.preprocess / n,
            inference: sum.inference / n,
            alignment: sum.alignment / n,
        }
    }
}

#[derive(Debug, Clone)]
struct Frame {
    cloud: PointCloud,
    weights: Option<Vec<f64>>,
}

#[derive(Debug, Error)]
enum FrameError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Covariance(#[from] CovarianceError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Voxel downsampling followed by covariance estimation.
pub fn preprocess(scan: &PointCloud, config: &OdometryConfig) -> Result<PointCloud, CovarianceError> {
    let down = voxel_downsample(scan, config.voxel_size)?;
    estimate_covariances(&down, &config.covariance)
}

fn prepare_frame(scan: &PointCloud, config: &OdometryConfig, model: Option<&WeightModel>, timing: &mut FrameTiming) -> Result<Frame, FrameError> {
    let start = Instant::now();
    let cloud = preprocess(scan, config)?;
    timing.preprocess = elapsed_ms(start);
    let start = Instant::now();
    let weights = model.map(|m| m.predict(&cloud)).transpose()?;
    timing.inference = elapsed_ms(start);
    Ok(Frame { cloud, weights })
}

/// Aligns `source` (frame t) to `target` (frame t-1). Returns the transform
/// and the number of source points used.
fn align_pair(source: &Frame, target: &Frame, config: &OdometryConfig, init: &RigidTransform) -> Result<(RigidTransform, usize), FrameError> {
    let problem = |s: PointCloud, t: PointCloud| {
        let mut p = WgicpProblem::new(s, t)
            .with_k_d(config.k_d)
            .with_lm(config.lm.clone())
            .with_initial(*init);
        p.knn_temperature = config.knn_temperature;
        p
    };
    match config.backend {
        Backend::Icp => {
            let res = align_icp_from(&source.cloud, &target.cloud, &config.lm, init)?;
            Ok((res.transform, source.cloud.len()))
        }
        Backend::Gicp => {
            let res = align_gicp(&problem(source.cloud.clone(), target.cloud.clone()))?;
            Ok((res.transform, source.cloud.len()))
        }
        Backend::Wgicp => {
            let (sw, tw) = match (&source.weights, &target.weights) {
                (Some(s), Some(t)) => (s, t),
                _ => {
                    let res = align_wgicp(&problem(source.cloud.clone(), target.cloud.clone()))?;
                    return Ok((res.transform, source.cloud.len()));
                }
            };
            let r = config.rejection_ratio;
            let k = config.covariance.k_neighbors;
            let enough = survivor_count(source.cloud.len(), r) >= k && survivor_count(target.cloud.len(), r) >= k;
            if r > 0.0 && enough {
                let s = hard_reject(&source.cloud, sw, r);
                let t = hard_reject(&target.cloud, tw, r);
                let used = s.len();
                let res = align_gicp(&problem(s, t))?;
                Ok((res.transform, used))
            } else {
                let s = source.cloud.clone().with_weights(sw.clone())?;
                let t = target.cloud.clone().with_weights(tw.clone())?;
                let res = align_wgicp(&problem(s, t))?;
                Ok((res.transform, source.cloud.len()))
            }
        }
    }
}

pub fn load_model(config: &OdometryConfig) -> Result<Option<WeightModel>, OdometryError> {
    match (&config.backend, &config.model_path) {
        (Backend::Wgicp, Some(path)) => Ok(Some(WeightModel::load(path)?)),
        _ => Ok(None),
    }
}

/// Runs the odometry pipeline over consecutive scans. Per-frame failures
/// fall back to an identity relative pose and are reported in `flagged`.
pub fn run_sequence<I>(scans: I, config: &OdometryConfig) -> Result<OdometryRun, OdometryError>
where
    I: IntoIterator<Item = PointCloud>,
{
    config.validate()?;
    let model = load_model(config)?;
    run_sequence_with_model(scans, config, model.as_ref())
}

pub fn run_sequence_with_model<I>(scans: I, config: &OdometryConfig, model: Option<&WeightModel>) -> Result<OdometryRun, OdometryError>
where
    I: IntoIterator<Item = PointCloud>,
{
    config.validate()?;
    let mut relative = Vec::new();
    let mut trajectory: Vec<RigidTransform> = Vec::new();
    let mut timings = Vec::new();
    let mut flagged = Vec::new();
    let mut survivors = Vec::new();
    let mut previous: Option<Result<Frame, String>> = None;
    for (t, scan) in scans.into_iter().enumerate() {
        let mut timing = FrameTiming::default();
        let frame = prepare_frame(&scan, config, model, &mut timing).map_err(|e| e.to_string());
        let total = frame.as_ref().map_or(0, |f| f.cloud.len());
        if t == 0 {
            if let Err(reason) = &frame {
                flagged.push(FlaggedFrame { frame: 0, reason: reason.clone() });
            }
            relative.push(RigidTransform::identity());
            trajectory.push(RigidTransform::identity());
            survivors.push((total, total));
        } else {
            let init = match config.initial_guess {
                InitialGuess::Identity => RigidTransform::identity(),
                InitialGuess::ConstantVelocity => relative[t - 1],
            };
            let start = Instant::now();
            let outcome = match (&frame, previous.as_ref().expect("previous frame")) {
                (Ok(src), Ok(tgt)) => align_pair(src, tgt, config, &init).map_err(|e| e.to_string()),
                (Err(e), _) => Err(e.clone()),
                (_, Err(e)) => Err(format!("previous frame: {e}")),
            };
            timing.alignment = elapsed_ms(start);
            let rel = match outcome {
                Ok((rel, used)) => {
                    survivors.push((used, total));
                    rel
                }
                Err(reason) => {
                    flagged.push(FlaggedFrame { frame: t, reason });
                    survivors.push((0, total));
                    RigidTransform::identity()
                }
            };
            trajectory.push(trajectory[t - 1].compose(&rel));
            relative.push(rel);
        }
        timings.push(timing);
        previous = Some(frame);
    }
    if relative.len() < 2 {
        return Err(OdometryError::TooFewScans(relative.len()));
    }
    Ok(OdometryRun {
        relative_poses: relative,
        trajectory,
        timings,
        flagged,
        survivors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthError {
    pub length: f64,
    pub windows: usize,
    /// Percent.
    pub t_rel: f64,
    /// Degrees per 100 m.
    pub r_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KittiErrors {
    /// Percent, averaged over every window of every length.
    pub t_rel: f64,
    /// Degrees per 100 m.
    pub r_rel: f64,
    pub windows: usize,
    pub per_length: Vec<LengthError>,
}

/// Cumulative path length along `poses`.
pub fn path_distances(poses: &[RigidTransform]) -> Vec<f64> {
    let mut out = Vec::with_capacity(poses.len());
    let mut acc = 0.0;
    for (k, p) in poses.iter().enumerate() {
        if k > 0 {
            acc += (p.translation() - poses[k - 1].translation()).norm();
        }
        out.push(acc);
    }
    out
}

/// KITTI relative errors over windows of 100-800 m of ground-truth path,
/// starting at every frame. A window ends at the first frame whose path
/// distance from the start is at least the length.
pub fn kitti_errors(estimate: &[RigidTransform], truth: &[RigidTransform]) -> Result<KittiErrors, OdometryError> {
    if estimate.len() != truth.len() {
        return Err(OdometryError::LengthMismatch {
            estimate: estimate.len(),
            truth: truth.len(),
        });
    }
    let dist = path_distances(truth);
    let mut per_length: Vec<LengthError> = KITTI_LENGTHS
        .iter()
        .map(|&length| LengthError {
            length,
            windows: 0,
            t_rel: 0.0,
            r_rel: 0.0,
        })
        .collect();
    let (mut t_sum, mut r_sum, mut windows) = (0.0, 0.0, 0usize);
    for first in 0..truth.len() {
        for entry in per_length.iter_mut() {
            let goal = dist[first] + entry.length;
            let Some(last) = (first..truth.len()).find(|&j| dist[j] >= goal) else {
                continue;
            };
            let gt_rel = truth[first].inverse().compose(&truth[last]);
            let est_rel = estimate[first].inverse().compose(&estimate[last]);
            let err = gt_rel.inverse().compose(&est_rel);
            let t_err = err.translation().norm() / entry.length;
            let r_err = err.angle() / entry.length;
            entry.windows += 1;
            entry.t_rel += t_err;
            entry.r_rel += r_err;
            t_sum += t_err;
            r_sum += r_err;
            windows += 1;
        }
    }
    if windows == 0 {
        return Err(OdometryError::SequenceTooShort {
            length: dist.last().copied().unwrap_or(0.0),
        });
    }
    let to_deg_per_100 = 100.0 * 180.0 / std::f64::consts::PI;
    for entry in &mut per_length {
        if entry.windows > 0 {
            entry.t_rel *= 100.0 / entry.windows as f64;
            entry.r_rel *= to_deg_per_100 / entry.windows as f64;
        }
    }
    Ok(KittiErrors {
        t_rel: 100.0 * t_sum / windows as f64,
        r_rel: to_deg_per_100 * r_sum / windows as f64,
        windows,
        per_length,
    })
}

/// Formats a metric value, `NA` when missing or not finite.
pub fn metric_value(v: Option<f64>) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{v}"),
        _ => "NA".to_string(),
    }
}

/// Deterministic run report, one `metric<TAB>value` line per metric.
pub fn format_report(run: &OdometryRun, errors: Option<&KittiErrors>) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(out, "{k}\t{v}");
    };
    line("frames", run.trajectory.len().to_string());
    line("flagged_frames", run.flagged.len().to_string());
    line("surviving_pct", metric_value(Some(run.surviving_percent())));
    line("t_rel_pct", metric_value(errors.map(|e| e.t_rel)));
    line("r_rel_deg_per_100m", metric_value(errors.map(|e| e.r_rel)));
    line("windows", metric_value(errors.map(|e| e.windows as f64)));
    for (k, &len) in KITTI_LENGTHS.iter().enumerate() {
        let entry = errors.map(|e| e.per_length[k]).filter(|e| e.windows > 0);
        line(&format!("t_rel_pct_{len}m"), metric_value(entry.map(|e| e.t_rel)));
        line(&format!("r_rel_deg_per_100m_{len}m"), metric_value(entry.map(|e| e.r_rel)));
    }
    out
}

/// Mean per-phase wall times; kept apart from the report since they vary
/// between runs.
pub fn format_timings(run: &OdometryRun) -> String {
    let mean = run.mean_timing();
    let mut out = String::new();
    let _ = writeln!(out, "preprocess_ms\t{}", mean.preprocess);
    let _ = writeln!(out, "inference_ms\t{}", mean.inference);
    let _ = writeln!(out, "alignment_ms\t{}", mean.alignment);
    out
}
