//! Sensor streams and their on-disk layout.
//!
//! A dataset directory holds `calib.txt`, `imu.csv`, `ground_truth.txt`,
//! `lis_poses.txt`, `images/<t>.pgm` and `scans/<t>.scan.csv`. Trajectory
//! files use `timestamp tx ty tz qx qy qz qw` with 9 significant digits;
//! the other numeric streams use the shortest representation that parses
//! back to the same value.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use super::HarnessError;
use crate::esikf_vis::ImuSample;
use crate::geometry::{Camera, CameraIntrinsics, Pose};
use crate::image_front::{read_pgm, write_pgm, GrayImage};
use crate::util::fmt_sig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub t: f64,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub camera: Camera,
    pub lidar_to_body: Pose,
    pub imu: Vec<ImuSample>,
    pub images: Vec<(f64, GrayImage)>,
    /// Points in the LiDAR frame.
    pub scans: Vec<(f64, Vec<Vector3<f64>>)>,
    /// Surrogate LIS body-to-world poses at scan times.
    pub lis_poses: Vec<StampedPose>,
    /// Body-to-world.
    pub ground_truth: Vec<StampedPose>,
}

pub const CALIB_FILE: &str = "calib.txt";
pub const IMU_FILE: &str = "imu.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.txt";
pub const LIS_FILE: &str = "lis_poses.txt";
pub const IMAGE_DIR: &str = "images";
pub const SCAN_DIR: &str = "scans";
const SCAN_SUFFIX: &str = ".scan.csv";
const IMAGE_SUFFIX: &str = ".pgm";

/// File-name stem for a timestamp (microsecond resolution).
pub fn stamp_name(t: f64) -> String {
    format!("{t:.6}")
}

pub fn write_trajectory<W: Write>(mut w: W, poses: &[StampedPose]) -> std::io::Result<()> {
    for p in poses {
        let q = p.pose.quaternion();
        let t = p.pose.translation;
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            fmt_sig(p.t),
            fmt_sig(t.x),
            fmt_sig(t.y),
            fmt_sig(t.z),
            fmt_sig(q.i),
            fmt_sig(q.j),
            fmt_sig(q.k),
            fmt_sig(q.w)
        )?;
    }
    Ok(())
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64, HarnessError> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| HarnessError::parse(path, line, format!("malformed number {field:?}")))
}

fn check_increasing(path: &Path, line: usize, last: Option<f64>, t: f64) -> Result<(), HarnessError> {
    match last {
        Some(prev) if !(t > prev) => Err(HarnessError::NonMonotonic {
            path: path.to_path_buf(),
            line,
            t,
        }),
        _ => Ok(()),
    }
}

/// Parse a trajectory file; `path` only labels errors.
pub fn read_trajectory<R: BufRead>(r: R, path: &Path) -> Result<Vec<StampedPose>, HarnessError> {
    let mut out: Vec<StampedPose> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(HarnessError::parse(path, n, format!("expected 8 fields, found {}", fields.len())));
        }
        let v = fields.iter().map(|f| parse_f64(path, n, f)).collect::<Result<Vec<_>, _>>()?;
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 1e-9) {
            return Err(HarnessError::parse(path, n, "zero quaternion"));
        }
        check_increasing(path, n, out.last().map(|p| p.t), v[0])?;
        out.push(StampedPose {
            t: v[0],
            pose: Pose::from_quaternion(&UnitQuaternion::from_quaternion(q), Vector3::new(v[1], v[2], v[3])),
        });
    }
    Ok(out)
}

pub fn load_trajectory(path: &Path) -> Result<Vec<StampedPose>, HarnessError> {
    let f = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    read_trajectory(BufReader::new(f), path)
}

pub fn save_trajectory(path: &Path, poses: &[StampedPose]) -> Result<(), HarnessError> {
    write_file(path, |w| write_trajectory(w, poses))
}

pub(crate) fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), HarnessError> {
    let f = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(f);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| HarnessError::io(path, e))
}

fn pose_fields(p: &Pose) -> String {
    let r = &p.rotation;
    let t = &p.translation;
    let vals = [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)], t.x, t.y, t.z];
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn write_calib<W: Write>(mut w: W, d: &Dataset) -> std::io::Result<()> {
    let k = &d.camera.intrinsics;
    writeln!(w, "width {}", d.camera.width)?;
    writeln!(w, "height {}", d.camera.height)?;
    writeln!(w, "fx {}", k.fx)?;
    writeln!(w, "fy {}", k.fy)?;
    writeln!(w, "cx {}", k.cx)?;
    writeln!(w, "cy {}", k.cy)?;
    writeln!(w, "cam_to_body {}", pose_fields(&d.camera.cam_to_body))?;
    writeln!(w, "lidar_to_body {}", pose_fields(&d.lidar_to_body))
}

fn read_calib(path: &Path) -> Result<(Camera, Pose), HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut entries: Vec<(usize, String, Vec<String>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let Some(key) = it.next() else { continue };
        if key.starts_with('#') {
            continue;
        }
        entries.push((i + 1, key.to_string(), it.map(str::to_string).collect()));
    }
    let find = |key: &str| -> Result<(usize, &Vec<String>), HarnessError> {
        entries
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(n, _, v)| (*n, v))
            .ok_or_else(|| HarnessError::parse(path, 0, format!("missing key {key}")))
    };
    let scalar = |key: &str| -> Result<(usize, f64), HarnessError> {
        let (n, v) = find(key)?;
        if v.len() != 1 {
            return Err(HarnessError::parse(path, n, format!("{key} takes one value")));
        }
        Ok((n, parse_f64(path, n, &v[0])?))
    };
    let size = |key: &str| -> Result<usize, HarnessError> {
        let (n, v) = find(key)?;
        match v.as_slice() {
            [s] => s.parse::<usize>().map_err(|_| HarnessError::parse(path, n, format!("malformed {key}"))),
            _ => Err(HarnessError::parse(path, n, format!("{key} takes one value"))),
        }
    };
    let pose = |key: &str| -> Result<Pose, HarnessError> {
        let (n, v) = find(key)?;
        if v.len() != 12 {
            return Err(HarnessError::parse(path, n, format!("{key} takes 12 values")));
        }
        let x = v.iter().map(|f| parse_f64(path, n, f)).collect::<Result<Vec<_>, _>>()?;
        let p = Pose::new(Matrix3::from_row_slice(&x[..9]), Vector3::new(x[9], x[10], x[11]));
        if !p.is_valid() {
            return Err(HarnessError::parse(path, n, format!("{key} rotation is not orthonormal")));
        }
        Ok(p)
    };
    let (n, fx) = scalar("fx")?;
    let intrinsics = CameraIntrinsics::new(fx, scalar("fy")?.1, scalar("cx")?.1, scalar("cy")?.1)
        .map_err(|e| HarnessError::parse(path, n, e.to_string()))?;
    let camera = Camera {
        intrinsics,
        width: size("width")?,
        height: size("height")?,
        cam_to_body: pose("cam_to_body")?,
    };
    Ok((camera, pose("lidar_to_body")?))
}

fn write_imu<W: Write>(mut w: W, imu: &[ImuSample]) -> std::io::Result<()> {
    writeln!(w, "t,ax,ay,az,gx,gy,gz")?;
    for s in imu {
        writeln!(w, "{},{},{},{},{},{},{}", s.t, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z)?;
    }
    Ok(())
}

fn read_csv_rows(path: &Path, header: &str, width: usize) -> Result<Vec<(usize, Vec<f64>)>, HarnessError> {
    let f = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if n == 1 {
            if line.trim() != header {
                return Err(HarnessError::parse(path, n, format!("expected header {header:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(HarnessError::parse(path, n, format!("expected {width} fields, found {}", fields.len())));
        }
        rows.push((n, fields.iter().map(|f| parse_f64(path, n, f)).collect::<Result<Vec<_>, _>>()?));
    }
    Ok(rows)
}

fn read_imu(path: &Path) -> Result<Vec<ImuSample>, HarnessError> {
    let mut out: Vec<ImuSample> = Vec::new();
    for (n, v) in read_csv_rows(path, "t,ax,ay,az,gx,gy,gz", 7)? {
        check_increasing(path, n, out.last().map(|s| s.t), v[0])?;
        out.push(ImuSample {
            t: v[0],
            accel: Vector3::new(v[1], v[2], v[3]),
            gyro: Vector3::new(v[4], v[5], v[6]),
        });
    }
    Ok(out)
}

fn write_scan<W: Write>(mut w: W, pts: &[Vector3<f64>]) -> std::io::Result<()> {
    writeln!(w, "x,y,z")?;
    for p in pts {
        writeln!(w, "{},{},{}", p.x, p.y, p.z)?;
    }
    Ok(())
}

/// Timestamped files in `dir` ending in `suffix`, sorted by time.
fn stamped_files(dir: &Path, suffix: &str, stream: &str) -> Result<Vec<(f64, PathBuf)>, HarnessError> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return Err(HarnessError::MissingStream(stream.to_string())),
    };
    let mut out = Vec::new();
    for e in entries {
        let e = e.map_err(|err| HarnessError::io(dir, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(suffix) else { continue };
        let t = stem
            .parse::<f64>()
            .ok()
            .filter(|t| t.is_finite())
            .ok_or_else(|| HarnessError::parse(e.path(), 0, "file name is not a timestamp"))?;
        out.push((t, e.path()));
    }
    if out.is_empty() {
        return Err(HarnessError::MissingStream(stream.to_string()));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(HarnessError::parse(&w[1].1, 0, "duplicate timestamp"));
    }
    Ok(out)
}

impl Dataset {
    /// Write the dataset into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        for sub in [IMAGE_DIR, SCAN_DIR] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| HarnessError::io(&p, e))?;
        }
        write_file(&dir.join(CALIB_FILE), |w| write_calib(w, self))?;
        write_file(&dir.join(IMU_FILE), |w| write_imu(w, &self.imu))?;
        save_trajectory(&dir.join(GROUND_TRUTH_FILE), &self.ground_truth)?;
        save_trajectory(&dir.join(LIS_FILE), &self.lis_poses)?;
        for (t, img) in &self.images {
            write_file(&dir.join(IMAGE_DIR).join(format!("{}{IMAGE_SUFFIX}", stamp_name(*t))), |w| write_pgm(w, img))?;
        }
        for (t, pts) in &self.scans {
            write_file(&dir.join(SCAN_DIR).join(format!("{}{SCAN_SUFFIX}", stamp_name(*t))), |w| write_scan(w, pts))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.imu.is_empty() {
            return Err(HarnessError::MissingStream("imu".into()));
        }
        if self.images.is_empty() {
            return Err(HarnessError::MissingStream("images".into()));
        }
        if self.ground_truth.is_empty() {
            return Err(HarnessError::MissingStream("ground_truth".into()));
        }
        if self.scans.len() != self.lis_poses.len() {
            return Err(HarnessError::Config(format!(
                "{} scans but {} LIS poses",
                self.scans.len(),
                self.lis_poses.len()
            )));
        }
        for ((ts, _), p) in self.scans.iter().zip(&self.lis_poses) {
            if (ts - p.t).abs() > 1e-6 {
                return Err(HarnessError::Config(format!("scan at {ts} has no LIS pose")));
            }
        }
        for (t, img) in &self.images {
            if img.width() != self.camera.width || img.height() != self.camera.height {
                return Err(HarnessError::Config(format!("image at {t} does not match the calibrated size")));
            }
        }
        Ok(())
    }
}

/// Read and validate a dataset directory.
pub fn ingest(dir: &Path) -> Result<Dataset, HarnessError> {
    if !dir.is_dir() {
        return Err(HarnessError::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let required = |name: &str| -> Result<PathBuf, HarnessError> {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(HarnessError::MissingStream(name.to_string()))
        }
    };
    let (camera, lidar_to_body) = read_calib(&required(CALIB_FILE)?)?;
    let imu = read_imu(&required(IMU_FILE)?)?;
    let ground_truth = load_trajectory(&required(GROUND_TRUTH_FILE)?)?;
    let lis_poses = load_trajectory(&required(LIS_FILE)?)?;
    let mut images = Vec::new();
    for (t, path) in stamped_files(&dir.join(IMAGE_DIR), IMAGE_SUFFIX, IMAGE_DIR)? {
        let f = File::open(&path).map_err(|e| HarnessError::io(&path, e))?;
        let img = read_pgm(BufReader::new(f)).map_err(|e| HarnessError::parse(&path, 0, e.to_string()))?;
        images.push((t, img));
    }
    let mut scans = Vec::new();
    for (t, path) in stamped_files(&dir.join(SCAN_DIR), SCAN_SUFFIX, SCAN_DIR)? {
        let pts = read_csv_rows(&path, "x,y,z", 3)?
            .into_iter()
            .map(|(_, v)| Vector3::new(v[0], v[1], v[2]))
            .collect();
        scans.push((t, pts));
    }
    let d = Dataset {
        camera,
        lidar_to_body,
        imu,
        images,
        scans,
        lis_poses,
        ground_truth,
    };
    d.validate()?;
    Ok(d)
}
