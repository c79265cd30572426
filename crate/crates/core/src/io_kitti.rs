//! KITTI odometry file formats: Velodyne `.bin` scans, pose text files and
//! the `Tr:` line of `calib.txt`.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use thiserror::Error;

use crate::geometry::{is_rotation, GeometryError, Point3, PointCloud, RigidTransform, Vec3};

/// Largest rotation-block deviation from orthonormality that is silently
/// projected back onto SO(3).
const MAX_ROTATION_DEVIATION: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum KittiIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: truncated file, {len} bytes is not a multiple of 16 (trailing record at byte offset {offset})")]
    TruncatedFile { path: PathBuf, len: u64, offset: u64 },
    #[error("{path}: malformed line {line} at byte offset {offset}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        offset: usize,
        reason: String,
    },
    #[error("{path}: line {line} does not hold a rotation (deviation {deviation:.3e})")]
    NonRotation {
        path: PathBuf,
        line: usize,
        deviation: f64,
    },
    #[error("{path}: no `Tr:` line found")]
    MissingCalibration { path: PathBuf },
    #[error("{path}: {source}")]
    Geometry {
        path: PathBuf,
        #[source]
        source: GeometryError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> KittiIoError + '_ {
    move |source| KittiIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelodyneScan {
    pub points: PointCloud,
    /// Parsed for completeness; registration only uses geometry.
    pub reflectances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFile {
    pub poses: Vec<RigidTransform>,
    /// Velodyne-to-camera extrinsic (`Tr:`), identity when no calibration was given.
    pub calib: RigidTransform,
}

impl PoseFile {
    /// Ground-truth relative motion of frame `t` into frame `t - 1`,
    /// expressed in the Velodyne frame: `calib^-1 * pose[t-1]^-1 * pose[t] * calib`.
    pub fn relative_velodyne(&self, t: usize) -> RigidTransform {
        let c = &self.calib;
        c.inverse() * self.poses[t - 1].inverse() * self.poses[t] * *c
    }

    /// All poses re-expressed in the Velodyne frame of frame 0.
    pub fn velodyne_trajectory(&self) -> Vec<RigidTransform> {
        let c = &self.calib;
        let first_inv = self.poses.first().map(|p| p.inverse()).unwrap_or_default();
        self.poses
            .iter()
            .map(|p| c.inverse() * first_inv * *p * *c)
            .collect()
    }
}

pub fn parse_velodyne_bytes(bytes: &[u8], path: &Path) -> Result<VelodyneScan, KittiIoError> {
    let rem = bytes.len() % 16;
    if rem != 0 {
        return Err(KittiIoError::TruncatedFile {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            offset: (bytes.len() - rem) as u64,
        });
    }
    let mut pts = Vec::with_capacity(bytes.len() / 16);
    let mut refl = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        pts.push(Point3::new(f(0), f(1), f(2)));
        refl.push(f(3));
    }
    let points = PointCloud::new(pts).map_err(|source| KittiIoError::Geometry {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(VelodyneScan {
        points,
        reflectances: refl,
    })
}

/// Reads a scan of little-endian `f32` records `(x, y, z, reflectance)`.
pub fn read_velodyne_bin(path: impl AsRef<Path>) -> Result<VelodyneScan, KittiIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_velodyne_bytes(&bytes, path)
}

pub fn write_velodyne_bin(scan: &PointCloud, reflectances: Option<&[f64]>, path: impl AsRef<Path>) -> Result<(), KittiIoError> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(scan.len() * 16);
    for (i, p) in scan.points().iter().enumerate() {
        let r = reflectances.map_or(0.0, |r| r[i]);
        for v in [p.x, p.y, p.z, r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Parses one row-major 3x4 matrix line. `offset` is the byte offset of the
/// line in its file, used for error reporting.
fn parse_matrix_line(text: &str, path: &Path, line: usize, offset: usize) -> Result<RigidTransform, KittiIoError> {
    let malformed = |reason: String| KittiIoError::MalformedLine {
        path: path.to_path_buf(),
        line,
        offset,
        reason,
    };
    let mut vals = [0.0f64; 12];
    let mut count = 0;
    for (k, tok) in text.split_whitespace().enumerate() {
        if k >= 12 {
            return Err(malformed(format!("expected 12 numbers, found more")));
        }
        let token_offset = offset + (tok.as_ptr() as usize - text.as_ptr() as usize);
        vals[k] = tok.parse::<f64>().map_err(|_| KittiIoError::MalformedLine {
            path: path.to_path_buf(),
            line,
            offset: token_offset,
            reason: format!("invalid number {tok:?}"),
        })?;
        if !vals[k].is_finite() {
            return Err(malformed(format!("non-finite value {tok:?}")));
        }
        count += 1;
    }
    if count != 12 {
        return Err(malformed(format!("expected 12 numbers, found {count}")));
    }
    let r = Matrix3::new(vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10]);
    let t = Vec3::new(vals[3], vals[7], vals[11]);
    let deviation = (r.transpose() * r - Matrix3::identity()).abs().max().max((r.determinant() - 1.0).abs());
    if !(deviation < MAX_ROTATION_DEVIATION) {
        return Err(KittiIoError::NonRotation {
            path: path.to_path_buf(),
            line,
            deviation,
        });
    }
    if is_rotation(&r, 1e-12) {
        Ok(RigidTransform::from_parts(r, t))
    } else {
        Ok(RigidTransform::orthonormalized(&r, t))
    }
}

/// Parses pose text; line `k` (0-based, blank lines skipped) is the pose of frame `k`.
pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<RigidTransform>, KittiIoError> {
    let mut poses = Vec::new();
    let mut offset = 0;
    for (line_no, line) in text.split_inclusive('\n').enumerate() {
        if !line.trim().is_empty() {
            poses.push(parse_matrix_line(line, path, line_no + 1, offset)?);
        }
        offset += line.len();
    }
    Ok(poses)
}

/// Reads the `Tr:` (Velodyne to camera) entry of a KITTI `calib.txt`.
pub fn read_calibration(path: impl AsRef<Path>) -> Result<RigidTransform, KittiIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut offset = 0;
    for (line_no, line) in text.split_inclusive('\n').enumerate() {
        if let Some(rest) = line.trim_start().strip_prefix("Tr:") {
            let rest_offset = offset + (rest.as_ptr() as usize - line.as_ptr() as usize);
            return parse_matrix_line(rest, path, line_no + 1, rest_offset);
        }
        offset += line.len();
    }
    Err(KittiIoError::MissingCalibration {
        path: path.to_path_buf(),
    })
}

pub fn read_poses(path: impl AsRef<Path>, calib_path: Option<&Path>) -> Result<PoseFile, KittiIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let poses = parse_poses(&text, path)?;
    let calib = match calib_path {
        Some(c) => read_calibration(c)?,
        None => RigidTransform::identity(),
    };
    Ok(PoseFile { poses, calib })
}

fn fmt_real(v: f64) -> String {
    // shortest representation that parses back to the same f64
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v}")
    }
}

/// One pose as a KITTI row-major 3x4 line (no trailing newline).
pub fn format_pose(t: &RigidTransform) -> String {
    let m = t.to_matrix();
    let mut parts = Vec::with_capacity(12);
    for r in 0..3 {
        for c in 0..4 {
            parts.push(fmt_real(m[(r, c)]));
        }
    }
    parts.join(" ")
}

pub fn write_trajectory(poses: &[RigidTransform], path: impl AsRef<Path>) -> Result<(), KittiIoError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for p in poses {
        writeln!(w, "{}", format_pose(p)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Parses whitespace-separated `x y z [...]` text, one point per line.
/// Lines starting with `#` and blank lines are ignored; extra columns are
/// ignored.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud, KittiIoError> {
    let mut pts = Vec::new();
    let mut offset = 0;
    for (line_no, line) in text.split_inclusive('\n').enumerate() {
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            let mut xyz = [0.0; 3];
            let mut toks = line.split_whitespace();
            for v in xyz.iter_mut() {
                let tok = toks.next().ok_or_else(|| KittiIoError::MalformedLine {
                    path: path.to_path_buf(),
                    line: line_no + 1,
                    offset,
                    reason: "expected at least 3 numbers".into(),
                })?;
                *v = tok.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    KittiIoError::MalformedLine {
                        path: path.to_path_buf(),
                        line: line_no + 1,
                        offset: offset + (tok.as_ptr() as usize - line.as_ptr() as usize),
                        reason: format!("invalid number {tok:?}"),
                    }
                })?;
            }
            pts.push(Point3::new(xyz[0], xyz[1], xyz[2]));
        }
        offset += line.len();
    }
    PointCloud::new(pts).map_err(|source| KittiIoError::Geometry {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), KittiIoError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for p in cloud.points() {
        writeln!(w, "{} {} {}", fmt_real(p.x), fmt_real(p.y), fmt_real(p.z)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Loads a cloud from `.bin` (Velodyne) or whitespace xyz text, chosen by
/// file extension.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud, KittiIoError> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("bin")) {
        Ok(read_velodyne_bin(path)?.points)
    } else {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        parse_xyz(&text, path)
    }
}

/// Sorted `.bin` files of a KITTI sequence directory (`<dir>/velodyne/*.bin`,
/// or `<dir>/*.bin` when there is no `velodyne` subdirectory).
pub fn list_scans(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, KittiIoError> {
    let dir = dir.as_ref();
    let velo = dir.join("velodyne");
    let root = if velo.is_dir() { velo } else { dir.to_path_buf() };
    let mut files: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(io_err(&root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn empty_and_single_record() {
        assert!(parse_velodyne_bytes(&[], p()).unwrap().points.is_empty());
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let scan = parse_velodyne_bytes(&bytes, p()).unwrap();
        assert_eq!(scan.points.points(), &[Point3::new(1.0, 2.0, 3.0)]);
        assert_eq!(scan.reflectances, vec![0.5]);
    }

    #[test]
    fn seventeen_bytes_is_truncated() {
        let err = parse_velodyne_bytes(&[0u8; 17], p()).unwrap_err();
        assert!(matches!(err, KittiIoError::TruncatedFile { len: 17, offset: 16, .. }));
    }

    #[test]
    fn non_finite_record_is_an_error() {
        let mut bytes = Vec::new();
        for v in [f32::NAN, 0.0, 0.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(parse_velodyne_bytes(&bytes, p()), Err(KittiIoError::Geometry { .. })));
    }

    #[test]
    fn identity_line() {
        let poses = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n", p()).unwrap();
        assert_eq!(poses, vec![RigidTransform::identity()]);
        assert_eq!(format_pose(&RigidTransform::identity()), "1 0 0 0 0 1 0 0 0 0 1 0");
    }

    #[test]
    fn eleven_numbers_is_malformed() {
        let err = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n", p()).unwrap_err();
        match err {
            KittiIoError::MalformedLine { line, offset, .. } => {
                assert_eq!(line, 2);
                assert_eq!(offset, 24);
            }
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            parse_poses("1 0 0 0 0 1 0 x 0 0 1 0", p()),
            Err(KittiIoError::MalformedLine { offset: 14, .. })
        ));
    }

    #[test]
    fn near_rotation_is_projected_and_far_is_rejected() {
        let poses = parse_poses("1.0001 0 0 0 0 1 0 0 0 0 1 0", p()).unwrap();
        assert!(is_rotation(poses[0].rotation(), 1e-12));
        assert!(matches!(
            parse_poses("2 0 0 0 0 1 0 0 0 0 1 0", p()),
            Err(KittiIoError::NonRotation { line: 1, .. })
        ));
    }

    #[test]
    fn calibration_and_relative_pose() {
        let dir = tempfile::tempdir().unwrap();
        let calib = dir.path().join("calib.txt");
        fs::write(&calib, "P0: 1 0 0 0 0 1 0 0 0 0 1 0\nTr: 0 -1 0 0 0 0 -1 0 1 0 0 -0.1\n").unwrap();
        let tr = read_calibration(&calib).unwrap();
        assert_eq!(tr.translation().z, -0.1);
        let poses = dir.path().join("poses.txt");
        fs::write(&poses, "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1 2\n").unwrap();
        let pf = read_poses(&poses, Some(&calib)).unwrap();
        // camera moves 2 m forward (+z), which is +x in the Velodyne frame
        let rel = pf.relative_velodyne(1);
        assert!((rel.translation() - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(matches!(
            read_calibration(&poses),
            Err(KittiIoError::MissingCalibration { .. })
        ));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_velodyne_bin("/nonexistent/scan.bin").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/scan.bin"));
    }

    #[test]
    fn xyz_text() {
        let c = parse_xyz("# header\n1 2 3\n\n4 5 6 0.7\n", p()).unwrap();
        assert_eq!(c.len(), 2);
        assert!(matches!(parse_xyz("1 2\n", p()), Err(KittiIoError::MalformedLine { line: 1, .. })));
        assert!(matches!(parse_xyz("1 2 3\n1 z 3\n", p()), Err(KittiIoError::MalformedLine { offset: 8, .. })));
    }

    proptest! {
        #[test]
        fn parsing_is_total(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let _ = parse_velodyne_bytes(&bytes, p());
            if let Ok(s) = std::str::from_utf8(&bytes) {
                let _ = parse_poses(s, p());
                let _ = parse_xyz(s, p());
            }
        }
    }

    #[test]
    fn hundred_random_poses_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let poses: Vec<_> = (0..100)
            .map(|_| {
                let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let t = Vec3::new(rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0), rng.gen_range(-50.0..50.0));
                RigidTransform::from_axis_angle(&axis, rng.gen_range(0.0..3.1), t)
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        write_trajectory(&poses, &path).unwrap();
        let back = read_poses(&path, None).unwrap();
        assert_eq!(back.poses.len(), poses.len());
        for (a, b) in poses.iter().zip(&back.poses) {
            assert!((a.to_matrix() - b.to_matrix()).abs().max() < 1e-9);
        }
    }
}
