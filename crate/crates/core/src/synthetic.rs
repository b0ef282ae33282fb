//! Synthetic scenes with exact ground truth.
//!
//! [`WireScene`] is a purely geometric set of 3D edge segments, rasterised
//! straight into edge maps. [`RenderScene`] ray-casts textured planes into
//! gray and depth images for end-to-end pipeline runs.

use std::collections::HashSet;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::{CameraIntrinsics, Pixel, Point3, Pose};
use crate::edges::{EdgeMap2D, EdgeMap3D, PixelCoord};
use crate::grid::{DepthImage, GrayImage, Grid};

/// Closest depth the rasteriser keeps.
const NEAR: f64 = 0.05;
/// Sampling step along projected segments, in pixels.
const RASTER_STEP: f64 = 0.2;

/// A 3D edge with the direction its image gradient points to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment3 {
    pub a: Point3,
    pub b: Point3,
    /// Any vector off the segment; its image projection fixes the gradient sign.
    pub side: Vector3<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WireScene {
    pub segments: Vec<Segment3>,
}

/// A rasterised sample: snapped pixel, exact 3D point, image gradient.
struct RasterSample {
    pixel: PixelCoord,
    exact: Pixel,
    point: Point3,
    grad: Vector2<f64>,
}

impl WireScene {
    /// Axis-aligned box wireframe rotated by `yaw` about the vertical axis.
    pub fn add_box(&mut self, center: Point3, size: Vector3<f64>, yaw: f64) {
        let (s, c) = yaw.sin_cos();
        let rot = |v: Vector3<f64>| Vector3::new(c * v.x + s * v.z, v.y, -s * v.x + c * v.z);
        let h = size / 2.0;
        let corner = |i: usize| {
            let sx = if i & 1 == 0 { -h.x } else { h.x };
            let sy = if i & 2 == 0 { -h.y } else { h.y };
            let sz = if i & 4 == 0 { -h.z } else { h.z };
            center + rot(Vector3::new(sx, sy, sz))
        };
        for i in 0..8usize {
            for bit in [1usize, 2, 4] {
                let j = i | bit;
                if j == i {
                    continue;
                }
                let (a, b) = (corner(i), corner(j));
                let mid = (a + b) / 2.0;
                let dir = (b - a).normalize();
                let inward = center - mid;
                let side = (inward - dir * dir.dot(&inward)).normalize();
                self.segments.push(Segment3 { a, b, side });
            }
        }
    }

    /// Three boxes between 2 and 4 units in front of a camera at the origin,
    /// rolled slightly so no edge is axis-aligned in the image (such edges
    /// snap to one pixel row or column and carry a constant offset).
    pub fn boxes() -> Self {
        let mut s = WireScene::default();
        s.add_box(Point3::new(-0.6, 0.1, 2.6), Vector3::new(0.7, 0.8, 0.6), 0.4);
        s.add_box(Point3::new(0.55, -0.15, 3.0), Vector3::new(0.8, 0.6, 0.7), -0.3);
        s.add_box(Point3::new(0.0, 0.45, 3.8), Vector3::new(1.6, 0.5, 0.5), 0.1);
        s.roll(0.05);
        s
    }

    /// Rotates the whole scene about the camera's optical axis.
    pub fn roll(&mut self, angle: f64) {
        let (sn, c) = angle.sin_cos();
        let r = |v: Vector3<f64>| Vector3::new(c * v.x - sn * v.y, sn * v.x + c * v.y, v.z);
        for seg in &mut self.segments {
            seg.a = r(seg.a);
            seg.b = r(seg.b);
            seg.side = r(seg.side);
        }
    }

    fn rasterize(&self, pose: &Pose, k: &CameraIntrinsics) -> Vec<RasterSample> {
        let rt = pose.rotation().transpose();
        let to_cam = |p: &Point3| rt * (p - pose.t);
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for seg in &self.segments {
            let (ca, cb) = (to_cam(&seg.a), to_cam(&seg.b));
            if ca.z <= NEAR || cb.z <= NEAR {
                continue;
            }
            let (pa, pb) = (k.project_unchecked(&ca), k.project_unchecked(&cb));
            let len = (pb - pa).norm();
            let n = ((len / RASTER_STEP).ceil() as usize).max(1);
            let line = (pb - pa) / len.max(1e-12);
            for i in 0..=n {
                let u = i as f64 / n as f64;
                let point = seg.a + (seg.b - seg.a) * u;
                let cam = to_cam(&point);
                let px = k.project_unchecked(&cam);
                let (x, y) = (px.x.round(), px.y.round());
                if x < 0.0 || y < 0.0 || x >= k.width as f64 || y >= k.height as f64 {
                    continue;
                }
                let pixel = PixelCoord::new(x as u32, y as u32);
                if !seen.insert(pixel) {
                    continue;
                }
                let off = k.project_unchecked(&to_cam(&(point + seg.side * 1e-3)));
                let mut normal = Vector2::new(-line.y, line.x);
                if normal.dot(&(off - px)) < 0.0 {
                    normal = -normal;
                }
                out.push(RasterSample {
                    pixel,
                    exact: px,
                    point,
                    grad: normal,
                });
            }
        }
        out
    }

    /// Model seen from a camera at the origin, one point per pixel.
    pub fn model(&self, k: &CameraIntrinsics) -> EdgeMap3D {
        let mut m = EdgeMap3D::default();
        for s in self.rasterize(&Pose::identity(), k) {
            m.push(s.point, s.exact, s.grad);
        }
        m
    }

    /// Edge map seen by a camera at `pose`, snapped to the pixel grid.
    pub fn data(&self, pose: &Pose, k: &CameraIntrinsics) -> EdgeMap2D {
        let mut e = EdgeMap2D::new(k.width, k.height);
        for s in self.rasterize(pose, k) {
            e.push(s.pixel, s.grad).expect("rasterised gradients are unit vectors");
        }
        e
    }

    pub fn data_pyramid(&self, pose: &Pose, ks: &[CameraIntrinsics]) -> Vec<EdgeMap2D> {
        ks.iter().map(|k| self.data(pose, k)).collect()
    }
}

/// Intensity pattern over a plane's local coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    Constant(f32),
    Checker { cell: f64, dark: f32, light: f32 },
    /// Random gray level per square cell.
    Blocks { cell: f64, cols: usize, levels: Vec<f32> },
}

impl Texture {
    pub fn blocks(cell: f64, cols: usize, rows: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = (0..cols * rows).map(|_| rng.gen_range(20.0..235.0f32)).collect();
        Texture::Blocks { cell, cols, levels }
    }

    fn sample(&self, a: f64, b: f64) -> f32 {
        match self {
            Texture::Constant(v) => *v,
            Texture::Checker { cell, dark, light } => {
                let (i, j) = ((a / cell).floor() as i64, (b / cell).floor() as i64);
                if (i + j).rem_euclid(2) == 0 {
                    *dark
                } else {
                    *light
                }
            }
            Texture::Blocks { cell, cols, levels } => {
                let rows = levels.len() / cols;
                let i = ((a / cell).floor().max(0.0) as usize).min(cols - 1);
                let j = ((b / cell).floor().max(0.0) as usize).min(rows - 1);
                levels[j * cols + i]
            }
        }
    }
}

/// A textured rectangle `origin + a·u + b·v`, `a ∈ [0, size.0]`, `b ∈ [0, size.1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TexturedPlane {
    pub origin: Point3,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub size: (f64, f64),
    pub texture: Texture,
}

impl TexturedPlane {
    /// Distance along `dir` from `from` to the plane, with local coordinates.
    fn intersect(&self, from: &Point3, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let n = self.u.cross(&self.v);
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = n.dot(&(self.origin - from)) / denom;
        if s <= NEAR {
            return None;
        }
        let rel = from + dir * s - self.origin;
        let (a, b) = (self.u.dot(&rel), self.v.dot(&rel));
        (a >= 0.0 && b >= 0.0 && a <= self.size.0 && b <= self.size.1).then_some((s, a, b))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RenderScene {
    pub planes: Vec<TexturedPlane>,
    pub background: f32,
}

impl RenderScene {
    /// A textured back wall, a floor and two cards at different depths.
    pub fn desk() -> Self {
        let x = Vector3::x();
        let y = Vector3::y();
        let z = Vector3::z();
        RenderScene {
            planes: vec![
                TexturedPlane {
                    origin: Point3::new(-3.0, -2.0, 4.0),
                    u: x,
                    v: y,
                    size: (6.0, 3.0),
                    texture: Texture::blocks(0.5, 12, 6, 1),
                },
                TexturedPlane {
                    origin: Point3::new(-3.0, 1.0, 0.5),
                    u: x,
                    v: z,
                    size: (6.0, 3.5),
                    texture: Texture::Checker {
                        cell: 0.4,
                        dark: 60.0,
                        light: 170.0,
                    },
                },
                TexturedPlane {
                    origin: Point3::new(-1.1, -0.6, 2.4),
                    u: Vector3::new(0.94, 0.0, -0.34),
                    v: y,
                    size: (0.8, 0.9),
                    texture: Texture::Checker {
                        cell: 0.2,
                        dark: 30.0,
                        light: 220.0,
                    },
                },
                TexturedPlane {
                    origin: Point3::new(0.4, -0.3, 2.9),
                    u: x,
                    v: Vector3::new(0.0, 0.96, 0.28),
                    size: (0.9, 0.8),
                    texture: Texture::blocks(0.15, 6, 6, 2),
                },
            ],
            background: 128.0,
        }
    }

    fn trace(&self, from: &Point3, dir: &Vector3<f64>) -> Option<(f64, f32)> {
        self.planes
            .iter()
            .filter_map(|p| p.intersect(from, dir).map(|(s, a, b)| (s, p.texture.sample(a, b))))
            .min_by(|l, r| l.0.total_cmp(&r.0))
    }

    /// Gray (3×3 supersampled) and metric depth images seen from `pose`.
    /// Pixels that see no plane get the background and depth 0.
    pub fn render(&self, pose: &Pose, k: &CameraIntrinsics) -> (GrayImage, DepthImage) {
        let r = pose.rotation();
        let (w, h) = (k.width, k.height);
        let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut gray = vec![0.0f32; w];
                let mut depth = vec![0.0f32; w];
                for x in 0..w {
                    let mut acc = 0.0f32;
                    for sy in [-1.0, 0.0, 1.0] {
                        for sx in [-1.0, 0.0, 1.0] {
                            let px = Pixel::new(x as f64 + sx / 3.0, y as f64 + sy / 3.0);
                            let d = r * Vector3::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy, 1.0);
                            let hit = self.trace(&pose.t, &d);
                            acc += hit.map_or(self.background, |(_, v)| v);
                            if sx == 0.0 && sy == 0.0 {
                                depth[x] = hit.map_or(0.0, |(s, _)| s as f32);
                            }
                        }
                    }
                    gray[x] = acc / 9.0;
                }
                (gray, depth)
            })
            .collect();
        let mut gray = Vec::with_capacity(w * h);
        let mut depth = Vec::with_capacity(w * h);
        for (g, d) in rows {
            gray.extend(g);
            depth.extend(d);
        }
        (Grid::from_vec(w, h, gray), Grid::from_vec(w, h, depth))
    }

    /// Renders `frames` and writes them as a TUM-style sequence: `rgb/`,
    /// `depth/`, `rgb.txt`, `depth.txt` and `groundtruth.txt`.
    pub fn write_sequence(
        &self,
        dir: &std::path::Path,
        k: &CameraIntrinsics,
        frames: &[(f64, Pose)],
        depth_scale: f64,
    ) -> crate::Result<()> {
        use std::fmt::Write as _;
        std::fs::create_dir_all(dir.join("rgb"))?;
        std::fs::create_dir_all(dir.join("depth"))?;
        let (mut rgb, mut depth) = (String::new(), String::new());
        for (t, pose) in frames {
            let (g, d) = self.render(pose, k);
            let name = format!("{t:.6}.png");
            crate::dataset::save_gray(&g, &dir.join("rgb").join(&name))?;
            crate::dataset::save_depth(&d, depth_scale, &dir.join("depth").join(&name))?;
            let _ = writeln!(rgb, "{t:.6} rgb/{name}");
            let _ = writeln!(depth, "{t:.6} depth/{name}");
        }
        std::fs::write(dir.join("rgb.txt"), rgb)?;
        std::fs::write(dir.join("depth.txt"), depth)?;
        let gt = crate::evaluation::Trajectory::new(frames.iter().map(|(t, p)| (*t, p.to_isometry())).collect())?;
        crate::dataset::write_trajectory_tum(&gt, dir.join("groundtruth.txt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edges::orientation_bin;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn box_scene_is_dense_enough() {
        let m = WireScene::boxes().model(&cam());
        assert!(m.len() >= 2000, "{} points", m.len());
        for (p, px) in m.points.iter().zip(&m.source_pixels) {
            let q = cam().project(p).unwrap();
            assert!((q - px).norm() < 1e-9);
        }
    }

    #[test]
    fn identity_data_matches_model_bins() {
        let s = WireScene::boxes();
        let m = s.model(&cam());
        let d = s.data(&Pose::identity(), &cam());
        assert_eq!(m.len(), d.len());
        for (g, b) in m.grad_dir.iter().zip(&d.bins) {
            assert_eq!(orientation_bin(g).unwrap(), *b as usize);
        }
    }

    #[test]
    fn render_depth_matches_planes() {
        let k = CameraIntrinsics::new(250.0, 250.0, 160.0, 120.0, 320, 240).unwrap();
        let (gray, depth) = RenderScene::desk().render(&Pose::identity(), &k);
        // the principal ray hits the back wall or a card, all in front of z = 4
        let z = depth.at(160, 120);
        assert!(z > 2.0 && z <= 4.0 + 1e-6);
        assert!(gray.as_slice().iter().all(|v| (0.0..=255.0).contains(v)));
        // the floor is seen below the horizon
        let zf = depth.at(160, 230) as f64;
        let yf = (230.0 - 120.0) / 250.0 * zf;
        assert!((yf - 1.0).abs() < 1e-3);
    }
}
