//! TUM RGB-D sequences, trajectory files and point-cloud export.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion};

use crate::camera::Point3;
use crate::error::{Error, Result};
use crate::evaluation::Trajectory;
use crate::grid::{DepthImage, GrayImage, Grid};

pub const DEFAULT_MAX_DT: f64 = 0.02;
pub const DEFAULT_DEPTH_SCALE: f64 = 5000.0;

/// One associated RGB-D pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFrame {
    pub timestamp: f64,
    pub rgb: PathBuf,
    pub depth_timestamp: f64,
    pub depth: PathBuf,
    pub ground_truth: Option<Isometry3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub root: PathBuf,
    pub frames: Vec<SequenceFrame>,
    pub depth_scale: f64,
    /// The full ground-truth trajectory, if present.
    pub ground_truth: Option<Trajectory>,
}

impl Sequence {
    pub fn load_gray(&self, frame: &SequenceFrame) -> Result<GrayImage> {
        load_gray(&frame.rgb)
    }

    pub fn load_depth(&self, frame: &SequenceFrame) -> Result<DepthImage> {
        load_depth(&frame.depth, self.depth_scale)
    }
}

/// `(timestamp, path)` entries of a TUM index file; `#` lines are skipped.
pub fn read_index(path: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(t), Some(p)) = (it.next(), it.next()) else {
            return Err(Error::Dataset(format!("{}:{}: expected `timestamp path`", path.display(), n + 1)));
        };
        let t: f64 = t
            .parse()
            .map_err(|_| Error::Dataset(format!("{}:{}: bad timestamp {t:?}", path.display(), n + 1)))?;
        out.push((t, root.join(p)));
    }
    Ok(out)
}

/// Greedy one-to-one association by smallest `|Δt| ≤ max_dt`, independent of
/// input order. Returns index pairs sorted by the first timestamp.
pub fn associate(a: &[f64], b: &[f64], max_dt: f64) -> Vec<(usize, usize)> {
    let mut cand = Vec::new();
    for (i, &ta) in a.iter().enumerate() {
        // b is usually sorted; a full scan keeps this order-independent
        for (j, &tb) in b.iter().enumerate() {
            let d = (ta - tb).abs();
            if d <= max_dt {
                cand.push((d, ta, tb, i, j));
            }
        }
    }
    cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.total_cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for (_, _, _, i, j) in cand {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out.sort_by(|x, y| a[x.0].total_cmp(&a[y.0]));
    out
}

/// Loads `rgb.txt`, `depth.txt` and, when present, `groundtruth.txt`.
pub fn load_tum_sequence(dir: impl AsRef<Path>, max_dt: f64, depth_scale: f64) -> Result<Sequence> {
    let dir = dir.as_ref();
    if !(depth_scale > 0.0) || !(max_dt >= 0.0) {
        return Err(Error::Config("depth_scale must be positive and max_dt non-negative".into()));
    }
    let rgb = read_index(&dir.join("rgb.txt"))?;
    let depth = read_index(&dir.join("depth.txt"))?;
    let rgb_t: Vec<f64> = rgb.iter().map(|e| e.0).collect();
    let depth_t: Vec<f64> = depth.iter().map(|e| e.0).collect();
    let pairs = associate(&rgb_t, &depth_t, max_dt);
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("{}: no rgb/depth associations", dir.display())));
    }
    let gt_path = dir.join("groundtruth.txt");
    let ground_truth = if gt_path.exists() {
        Some(read_trajectory_tum(&gt_path)?)
    } else {
        None
    };
    let frames = pairs
        .into_iter()
        .map(|(i, j)| SequenceFrame {
            timestamp: rgb[i].0,
            rgb: rgb[i].1.clone(),
            depth_timestamp: depth[j].0,
            depth: depth[j].1.clone(),
            ground_truth: ground_truth
                .as_ref()
                .and_then(|g| g.nearest(rgb[i].0, max_dt))
                .map(|(_, p)| p),
        })
        .collect();
    Ok(Sequence {
        root: dir.to_path_buf(),
        frames,
        depth_scale,
        ground_truth,
    })
}

/// Gray image with intensities in `[0, 255]`.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_vec(w as usize, h as usize, img.into_raw().into_iter().map(f32::from).collect()))
}

/// 16-bit depth image converted to metres (`raw / depth_scale`; 0 stays invalid).
pub fn load_depth(path: &Path, depth_scale: f64) -> Result<DepthImage> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| (v as f64 / depth_scale) as f32).collect();
    Ok(Grid::from_vec(w as usize, h as usize, data))
}

/// Writes a depth image in metres as a 16-bit PNG.
pub fn save_depth(depth: &DepthImage, depth_scale: f64, path: &Path) -> Result<()> {
    let raw: Vec<u16> = depth
        .as_slice()
        .iter()
        .map(|&z| (z as f64 * depth_scale).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(depth.width() as u32, depth.height() as u32, raw)
        .expect("buffer matches dimensions");
    img.save(path)?;
    Ok(())
}

/// Writes a gray image (clamped to `[0, 255]`) as an 8-bit PNG.
pub fn save_gray(gray: &GrayImage, path: &Path) -> Result<()> {
    let raw: Vec<u8> = gray.as_slice().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    let img = image::GrayImage::from_raw(gray.width() as u32, gray.height() as u32, raw).expect("buffer matches dimensions");
    img.save(path)?;
    Ok(())
}

fn num(v: f64) -> f64 {
    // print -0 as 0
    v + 0.0
}

/// One line per pose: `%.6f tx ty tz qx qy qz qw`, with `qw ≥ 0`.
pub fn format_tum_line(timestamp: f64, pose: &Isometry3<f64>) -> String {
    let t = pose.translation.vector;
    let mut q = *pose.rotation.quaternion();
    if q.w < 0.0 {
        q = -q;
    }
    format!(
        "{timestamp:.6} {} {} {} {} {} {} {}",
        num(t.x),
        num(t.y),
        num(t.z),
        num(q.i),
        num(q.j),
        num(q.k),
        num(q.w)
    )
}

pub fn write_trajectory_tum(trajectory: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    if trajectory.is_empty() {
        return Err(Error::Dataset("empty trajectory".into()));
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    for (t, p) in trajectory.iter() {
        writeln!(out, "{}", format_tum_line(*t, p))?;
    }
    out.flush()?;
    Ok(())
}

pub fn parse_trajectory_tum(text: &str) -> Result<Trajectory> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Dataset(format!("line {}: {e}", n + 1)))?;
        if v.len() != 8 {
            return Err(Error::Dataset(format!("line {}: expected 8 values, got {}", n + 1, v.len())));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 0.0) {
            return Err(Error::Dataset(format!("line {}: zero quaternion", n + 1)));
        }
        entries.push((
            v[0],
            Isometry3::from_parts(Translation3::new(v[1], v[2], v[3]), UnitQuaternion::from_quaternion(q)),
        ));
    }
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    entries.dedup_by(|a, b| a.0 == b.0);
    Trajectory::new(entries)
}

pub fn read_trajectory_tum(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    parse_trajectory_tum(&text)
}

/// ASCII PLY of all points, each cloud moved to the world by its pose.
pub fn export_pointcloud_ply<'a>(
    clouds: impl IntoIterator<Item = (&'a Isometry3<f64>, &'a [Point3])>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut points = Vec::new();
    let mut count = 0;
    for (pose, pts) in clouds {
        count += 1;
        points.extend(pts.iter().map(|p| pose.transform_point(&(*p).into()).coords));
    }
    if count == 0 {
        return Err(Error::Dataset("no reference frames to export".into()));
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
    writeln!(out, "property float x\nproperty float y\nproperty float z\nend_header")?;
    for p in points {
        writeln!(out, "{} {} {}", num(p.x), num(p.y), num(p.z))?;
    }
    out.flush()?;
    Ok(())
}
