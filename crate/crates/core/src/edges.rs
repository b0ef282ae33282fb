//! Gradients, Canny edges, orientation bins and 3D edge maps.

use std::collections::VecDeque;

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::camera::{CameraIntrinsics, Pixel, Point3};
use crate::error::{Error, Result};
use crate::grid::{DepthImage, GrayImage, Grid};

/// Number of gradient-orientation bins.
pub const NUM_BINS: usize = 8;

/// Pixels within this distance of the border get zero gradient.
pub const GRADIENT_MARGIN: usize = 2;

const MIN_IMAGE_SIZE: usize = 5;

/// Per-pixel image gradient in intensity units per pixel.
#[derive(Debug, Clone)]
pub struct GradientMap {
    pub gx: Grid<f32>,
    pub gy: Grid<f32>,
    pub norm: Grid<f32>,
}

impl GradientMap {
    pub fn width(&self) -> usize {
        self.norm.width()
    }

    pub fn height(&self) -> usize {
        self.norm.height()
    }
}

/// Integer pixel location; `x` is the column and `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelCoord {
    pub x: u32,
    pub y: u32,
}

impl PixelCoord {
    pub fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }

    pub fn to_pixel(self) -> Pixel {
        Pixel::new(self.x as f64, self.y as f64)
    }
}

/// A set of edge pixels with unit gradient directions and orientation bins.
#[derive(Debug, Clone, Default)]
pub struct EdgeMap2D {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<PixelCoord>,
    pub grad_dir: Vec<Vector2<f64>>,
    pub bins: Vec<u8>,
}

impl EdgeMap2D {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..Default::default()
        }
    }

    /// Adds an edge pixel; the bin is derived from `grad`, which must be nonzero.
    pub fn push(&mut self, px: PixelCoord, grad: Vector2<f64>) -> Result<()> {
        let n = grad.norm();
        let bin = orientation_bin(&grad)?;
        self.pixels.push(px);
        self.grad_dir.push(grad / n);
        self.bins.push(bin as u8);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Reference-frame edge points with their source pixels and model gradients.
#[derive(Debug, Clone, Default)]
pub struct EdgeMap3D {
    pub points: Vec<Point3>,
    pub source_pixels: Vec<Pixel>,
    pub grad_dir: Vec<Vector2<f64>>,
    pub depths: Vec<f64>,
}

impl EdgeMap3D {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, point: Point3, pixel: Pixel, grad: Vector2<f64>) {
        self.depths.push(point.z);
        self.points.push(point);
        self.source_pixels.push(pixel);
        self.grad_dir.push(grad);
    }

    /// Keeps the entries whose index satisfies `keep`.
    pub fn retain_indices(&self, keep: impl Fn(usize) -> bool) -> Self {
        let mut out = Self::default();
        for i in (0..self.len()).filter(|&i| keep(i)) {
            out.points.push(self.points[i]);
            out.source_pixels.push(self.source_pixels[i]);
            out.grad_dir.push(self.grad_dir[i]);
            out.depths.push(self.depths[i]);
        }
        out
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::default();
        for &i in indices {
            out.points.push(self.points[i]);
            out.source_pixels.push(self.source_pixels[i]);
            out.grad_dir.push(self.grad_dir[i]);
            out.depths.push(self.depths[i]);
        }
        out
    }

    /// Model for pyramid level `level`: source pixels scaled by `2^-level` and
    /// at most one point per level cell (the first in storage order).
    pub fn for_level(&self, level: usize) -> Self {
        if level == 0 {
            return self.clone();
        }
        let s = (1u64 << level) as f64;
        let mut seen = std::collections::HashSet::new();
        let mut keep = Vec::new();
        for (i, px) in self.source_pixels.iter().enumerate() {
            let cell = ((px.x / s).round() as i64, (px.y / s).round() as i64);
            if seen.insert(cell) {
                keep.push(i);
            }
        }
        let mut out = self.select(&keep);
        for px in &mut out.source_pixels {
            *px /= s;
        }
        out
    }

    pub fn pyramid(&self, levels: usize) -> Vec<Self> {
        (0..levels).map(|l| self.for_level(l)).collect()
    }
}

fn gaussian_kernel_5(sigma: f64) -> [f32; 5] {
    let mut k = [0.0f64; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 2.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| (v / s) as f32)
}

/// Separable 5-tap correlation with clamped borders.
fn correlate_separable(img: &Grid<f32>, kx: &[f32; 5], ky: &[f32; 5]) -> Grid<f32> {
    let (w, h) = (img.width(), img.height());
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0f32; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let src = img.row(y);
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, k) in kx.iter().enumerate() {
                acc += k * src[clamp(x as i64 + i as i64 - 2, w)];
            }
            *out = acc;
        }
    });
    let mut out = vec![0.0f32; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, k) in ky.iter().enumerate() {
                acc += k * tmp[clamp(y as i64 + i as i64 - 2, h) * w + x];
            }
            *o = acc;
        }
    });
    Grid::from_vec(w, h, out)
}

/// Gaussian smoothing (5x5, sigma 1) followed by a normalised 5x5 Sobel operator.
pub fn compute_gradients(gray: &GrayImage) -> Result<GradientMap> {
    compute_gradients_with_sigma(gray, 1.0)
}

pub fn compute_gradients_with_sigma(gray: &GrayImage, sigma: f64) -> Result<GradientMap> {
    let (w, h) = (gray.width(), gray.height());
    if w < MIN_IMAGE_SIZE || h < MIN_IMAGE_SIZE {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            min: MIN_IMAGE_SIZE,
        });
    }
    let g = gaussian_kernel_5(sigma);
    let smoothed = correlate_separable(gray, &g, &g);
    // 5x5 Sobel, normalised so a unit ramp gives 1
    let deriv = [-1.0f32, -2.0, 0.0, 2.0, 1.0].map(|v| v / 8.0);
    let smooth = [1.0f32, 4.0, 6.0, 4.0, 1.0].map(|v| v / 16.0);
    let mut gx = correlate_separable(&smoothed, &deriv, &smooth);
    let mut gy = correlate_separable(&smoothed, &smooth, &deriv);
    let mut norm = Grid::new(w, h, 0.0f32);
    for y in 0..h {
        for x in 0..w {
            let border = x < GRADIENT_MARGIN || y < GRADIENT_MARGIN || x >= w - GRADIENT_MARGIN || y >= h - GRADIENT_MARGIN;
            if border {
                gx.set(x, y, 0.0);
                gy.set(x, y, 0.0);
            } else {
                let (a, b) = (gx.at(x, y), gy.at(x, y));
                norm.set(x, y, (a * a + b * b).sqrt());
            }
        }
    }
    Ok(GradientMap { gx, gy, norm })
}

/// Orientation bin `k` such that the inclination lies in `[45k - 22.5°, 45k + 22.5°)`.
pub fn orientation_bin(grad: &Vector2<f64>) -> Result<usize> {
    if !(grad.x != 0.0 || grad.y != 0.0) || !grad.x.is_finite() || !grad.y.is_finite() {
        return Err(Error::UndefinedDirection);
    }
    let deg = grad.y.atan2(grad.x).to_degrees().rem_euclid(360.0);
    Ok((((deg + 22.5) / 45.0).floor() as usize) % NUM_BINS)
}

/// Unit vector at the centre of bin `k`.
pub fn bin_center(k: usize) -> Vector2<f64> {
    let a = (45.0 * k as f64).to_radians();
    Vector2::new(a.cos(), a.sin())
}

/// Canny thresholds derived from the gradient statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyThresholds {
    pub high: f64,
    pub low: f64,
}

/// Fraction of nonzero gradient norms that fall below the high threshold.
pub const DEFAULT_HIGH_PERCENTILE: f64 = 0.92;
pub const DEFAULT_LOW_RATIO: f64 = 0.4;
/// Norms at or below this are treated as zero when computing percentiles.
const ZERO_NORM: f32 = 1e-3;

impl CannyThresholds {
    /// `high` at the given percentile of nonzero norms, `low = ratio * high`.
    /// Returns `None` when the image has no gradient at all.
    pub fn from_percentile(grad: &GradientMap, percentile: f64, low_ratio: f64) -> Option<Self> {
        let mut v: Vec<f32> = grad.norm.as_slice().iter().copied().filter(|&n| n > ZERO_NORM).collect();
        if v.is_empty() {
            return None;
        }
        let idx = ((v.len() - 1) as f64 * percentile.clamp(0.0, 1.0)).round() as usize;
        let (_, high, _) = v.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
        let high = *high as f64;
        Some(Self {
            high,
            low: low_ratio * high,
        })
    }

    pub fn automatic(grad: &GradientMap) -> Option<Self> {
        Self::from_percentile(grad, DEFAULT_HIGH_PERCENTILE, DEFAULT_LOW_RATIO)
    }
}

/// Neighbour offsets across the edge for a gradient direction quantised to 0/45/90/135°.
fn nms_offsets(gx: f32, gy: f32) -> (i64, i64) {
    let deg = (gy as f64).atan2(gx as f64).to_degrees().rem_euclid(180.0);
    match deg {
        d if !(22.5..157.5).contains(&d) => (1, 0),
        d if d < 67.5 => (1, 1),
        d if d < 112.5 => (0, 1),
        _ => (-1, 1),
    }
}

/// The literal non-maximum-suppression predicate: `norm` is at least that of
/// both neighbours along the quantised gradient direction, strictly greater
/// than the one on the positive side.
pub fn is_local_maximum(grad: &GradientMap, x: usize, y: usize) -> bool {
    let n = grad.norm.at(x, y);
    if n <= 0.0 {
        return false;
    }
    let (dx, dy) = nms_offsets(grad.gx.at(x, y), grad.gy.at(x, y));
    let sample = |xx: i64, yy: i64| {
        if grad.norm.contains(xx, yy) {
            grad.norm.at(xx as usize, yy as usize)
        } else {
            0.0
        }
    };
    let ahead = sample(x as i64 + dx, y as i64 + dy);
    let behind = sample(x as i64 - dx, y as i64 - dy);
    n > ahead && n >= behind
}

/// Canny edge detection: non-maximum suppression plus hysteresis.
pub fn canny_edges(grad: &GradientMap, high: f64, low: f64) -> Result<EdgeMap2D> {
    if !(low > 0.0 && low <= high) {
        return Err(Error::InvalidThresholds { low, high });
    }
    let (w, h) = (grad.width(), grad.height());
    // 0 = none, 1 = weak, 2 = strong
    let mut class = vec![0u8; w * h];
    class.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, c) in row.iter_mut().enumerate() {
            let n = grad.norm.at(x, y) as f64;
            if n >= low && is_local_maximum(grad, x, y) {
                *c = if n >= high { 2 } else { 1 };
            }
        }
    });

    let mut keep = vec![false; w * h];
    let mut queue = VecDeque::new();
    for (i, &c) in class.iter().enumerate() {
        if c == 2 {
            keep[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if class[j] == 1 && !keep[j] {
                    keep[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }

    let mut edges = EdgeMap2D::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if keep[y * w + x] {
                let g = Vector2::new(grad.gx.at(x, y) as f64, grad.gy.at(x, y) as f64);
                edges.push(PixelCoord::new(x as u32, y as u32), g)?;
            }
        }
    }
    Ok(edges)
}

/// Canny with automatic thresholds (or explicit ones when given).
pub fn detect_edges(gray: &GrayImage, thresholds: Option<CannyThresholds>) -> Result<EdgeMap2D> {
    let grad = compute_gradients(gray)?;
    match thresholds.or_else(|| CannyThresholds::automatic(&grad)) {
        Some(t) => canny_edges(&grad, t.high, t.low),
        None => Ok(EdgeMap2D::new(gray.width(), gray.height())),
    }
}

/// Depth-noise model used for foreground clustering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthClustering {
    /// Patch half-size (2 for a 5x5 patch).
    pub radius: usize,
    /// Standard deviation is `max(sigma_floor, sigma_quadratic * z^2)`.
    pub sigma_floor: f64,
    pub sigma_quadratic: f64,
    /// Gap, in standard deviations, that separates two clusters.
    pub gap_sigmas: f64,
    pub min_cluster: usize,
}

impl Default for DepthClustering {
    fn default() -> Self {
        Self {
            radius: 2,
            sigma_floor: 0.01,
            sigma_quadratic: 0.0025,
            gap_sigmas: 3.0,
            min_cluster: 3,
        }
    }
}

/// Foreground depth at `(x, y)` with the default clustering model.
pub fn foreground_depth(depth: &DepthImage, x: usize, y: usize) -> Option<f64> {
    foreground_depth_with(depth, x, y, &DepthClustering::default())
}

/// Centre of the closest depth cluster (with at least `min_cluster` samples) in
/// the patch around `(x, y)`. The patch is clipped at the image border.
pub fn foreground_depth_with(depth: &DepthImage, x: usize, y: usize, model: &DepthClustering) -> Option<f64> {
    let r = model.radius;
    let (x0, x1) = (x.saturating_sub(r), (x + r).min(depth.width() - 1));
    let (y0, y1) = (y.saturating_sub(r), (y + r).min(depth.height() - 1));
    let mut samples: Vec<f64> = Vec::with_capacity((2 * r + 1) * (2 * r + 1));
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            let d = depth.at(xx, yy) as f64;
            if d.is_finite() && d > 0.0 {
                samples.push(d);
            }
        }
    }
    if samples.is_empty() {
        return None;
    }
    samples.sort_by(|a, b| a.total_cmp(b));
    let mut start = 0;
    for i in 1..=samples.len() {
        let split = i == samples.len() || {
            let z = samples[i - 1];
            let sigma = model.sigma_floor.max(model.sigma_quadratic * z * z);
            samples[i] - z > model.gap_sigmas * sigma
        };
        if split {
            let cluster = &samples[start..i];
            if cluster.len() >= model.min_cluster {
                return Some(cluster.iter().sum::<f64>() / cluster.len() as f64);
            }
            start = i;
        }
    }
    None
}

/// Backprojects every edge pixel with a valid foreground depth. When more
/// than `max_points` survive, a uniform stride over the list is kept.
pub fn build_edge_map_3d(
    edges: &EdgeMap2D,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    max_points: usize,
) -> Result<EdgeMap3D> {
    if edges.width != depth.width() || edges.height != depth.height() {
        return Err(Error::SizeMismatch(edges.width, edges.height, depth.width(), depth.height()));
    }
    let model = DepthClustering::default();
    let candidates: Vec<(usize, f64)> = edges
        .pixels
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| foreground_depth_with(depth, p.x as usize, p.y as usize, &model).map(|z| (i, z)))
        .collect();
    let chosen: Vec<(usize, f64)> = if candidates.len() > max_points {
        let n = candidates.len();
        (0..max_points).map(|j| candidates[j * n / max_points]).collect()
    } else {
        candidates
    };
    let mut out = EdgeMap3D::default();
    for (i, z) in chosen {
        let px = edges.pixels[i].to_pixel();
        let p = k.backproject(&px, z)?;
        out.push(p, px, edges.grad_dir[i]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn step_image(w: usize, h: usize, step_x: usize) -> GrayImage {
        Grid::from_fn(w, h, |x, _| if x >= step_x { 200.0 } else { 50.0 })
    }

    #[test]
    fn constant_image_has_no_gradient_or_edges() {
        let img = GrayImage::new(16, 16, 77.0);
        let g = compute_gradients(&img).unwrap();
        assert!(g.norm.as_slice().iter().all(|&n| n == 0.0));
        assert!(CannyThresholds::automatic(&g).is_none());
        assert!(detect_edges(&img, None).unwrap().is_empty());
    }

    #[test]
    fn too_small_image_rejected() {
        let img = GrayImage::new(4, 10, 0.0);
        assert!(matches!(compute_gradients(&img), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn ramp_has_unit_horizontal_gradient() {
        let img = Grid::from_fn(20, 20, |x, _| x as f32);
        let g = compute_gradients(&img).unwrap();
        for y in 4..16 {
            for x in 4..16 {
                assert_relative_eq!(g.gx.at(x, y), 1.0, epsilon = 1e-4);
                assert!(g.gy.at(x, y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn vertical_step_gives_positive_gx() {
        let img = step_image(7, 7, 4);
        let g = compute_gradients(&img).unwrap();
        for y in 2..5 {
            assert!(g.gx.at(3, y) > 0.0 && g.gx.at(4, y) > 0.0);
            assert_eq!(g.gy.at(3, y), 0.0);
        }
        // the margin is zeroed
        assert_eq!(g.norm.at(1, 3), 0.0);
    }

    #[test]
    fn single_step_gives_one_pixel_wide_chain() {
        let img = step_image(32, 24, 16);
        let e = detect_edges(&img, None).unwrap();
        assert!(!e.is_empty());
        for y in GRADIENT_MARGIN..24 - GRADIENT_MARGIN {
            let row: Vec<_> = e.pixels.iter().filter(|p| p.y as usize == y).collect();
            assert_eq!(row.len(), 1, "row {y}: {row:?}");
            assert!((15..=16).contains(&row[0].x));
        }
        assert!(e.bins.iter().all(|&b| b == 0));
    }

    #[test]
    fn two_steps_give_two_chains() {
        let img = Grid::from_fn(40, 20, |x, _| if (10..20).contains(&x) { 180.0 } else { 40.0 });
        let e = detect_edges(&img, None).unwrap();
        let mut cols: Vec<u32> = e.pixels.iter().map(|p| p.x).collect();
        cols.sort();
        cols.dedup();
        assert_eq!(cols.len(), 2, "{cols:?}");
        assert!(cols[1] - cols[0] >= 9);
        // rising edge at bin 0, falling edge at bin 4
        let bins: std::collections::HashSet<u8> = e.bins.iter().copied().collect();
        assert_eq!(bins, [0u8, 4].into_iter().collect());
    }

    #[test]
    fn canny_rejects_bad_thresholds() {
        let g = compute_gradients(&step_image(8, 8, 4)).unwrap();
        assert!(canny_edges(&g, 1.0, 2.0).is_err());
        assert!(canny_edges(&g, 1.0, 0.0).is_err());
    }

    #[test]
    fn nms_predicate_holds_for_all_edges() {
        let img = Grid::from_fn(48, 48, |x, y| {
            let (dx, dy) = (x as f32 - 24.0, y as f32 - 20.0);
            if dx * dx + dy * dy < 150.0 { 220.0 } else { 30.0 }
        });
        let g = compute_gradients(&img).unwrap();
        let e = detect_edges(&img, None).unwrap();
        assert!(e.len() > 20);
        for p in &e.pixels {
            assert!(is_local_maximum(&g, p.x as usize, p.y as usize));
        }
    }

    #[test]
    fn bins_of_centres() {
        assert_eq!(orientation_bin(&Vector2::new(1.0, 0.0)).unwrap(), 0);
        assert_eq!(orientation_bin(&Vector2::new(1.0, 1.0).normalize()).unwrap(), 1);
        assert_eq!(orientation_bin(&Vector2::new(-1.0, 0.0)).unwrap(), 4);
        for k in 0..NUM_BINS {
            assert_eq!(orientation_bin(&bin_center(k)).unwrap(), k);
        }
        assert!(matches!(orientation_bin(&Vector2::zeros()), Err(Error::UndefinedDirection)));
    }

    #[test]
    fn bins_constant_on_open_intervals() {
        for k in 0..NUM_BINS {
            for i in 1..45 {
                let a = (45.0 * k as f64 - 22.5 + i as f64).to_radians();
                assert_eq!(orientation_bin(&Vector2::new(a.cos(), a.sin())).unwrap(), k);
            }
        }
    }

    fn patch(values: impl Fn(usize, usize) -> f32) -> DepthImage {
        Grid::from_fn(5, 5, values)
    }

    #[test]
    fn foreground_depth_examples() {
        assert_relative_eq!(foreground_depth(&patch(|_, _| 1.0), 2, 2).unwrap(), 1.0, epsilon = 1e-6);
        let split = patch(|x, _| if x < 2 || (x == 2) { 1.0 } else { 3.0 });
        let mut half = split.clone();
        half.set(2, 2, 3.0);
        assert_relative_eq!(foreground_depth(&half, 2, 2).unwrap(), 1.0, epsilon = 1e-6);
        assert!(foreground_depth(&patch(|_, _| 0.0), 2, 2).is_none());
        assert!(foreground_depth(&patch(|_, _| f32::NAN), 2, 2).is_none());
    }

    #[test]
    fn foreground_ignores_tiny_clusters() {
        // two near samples (fewer than three) do not form a foreground cluster
        let p = patch(|x, y| if (x, y) == (0, 0) || (x, y) == (1, 0) { 0.5 } else { 2.0 });
        assert_relative_eq!(foreground_depth(&p, 2, 2).unwrap(), 2.0, epsilon = 1e-6);
    }

    #[test]
    fn edge_map_3d_single_point() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let mut e = EdgeMap2D::new(640, 480);
        e.push(PixelCoord::new(320, 240), Vector2::new(1.0, 0.0)).unwrap();
        e.push(PixelCoord::new(10, 10), Vector2::new(1.0, 0.0)).unwrap();
        let mut depth = DepthImage::new(640, 480, 2.0);
        for y in 8..13 {
            for x in 8..13 {
                depth.set(x, y, 0.0);
            }
        }
        let m = build_edge_map_3d(&e, &depth, &k, 6500).unwrap();
        assert_eq!(m.len(), 1);
        assert_relative_eq!(m.points[0], Point3::new(0.0, 0.0, 2.0), epsilon = 1e-6);
    }

    #[test]
    fn edge_map_3d_is_capped() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let mut e = EdgeMap2D::new(640, 480);
        for i in 0..10_000u32 {
            e.push(PixelCoord::new(10 + i % 600, 10 + i / 600), Vector2::new(0.0, 1.0)).unwrap();
        }
        let depth = DepthImage::new(640, 480, 1.5);
        let m = build_edge_map_3d(&e, &depth, &k, 6500).unwrap();
        assert_eq!(m.len(), 6500);
        for (p, px) in m.points.iter().zip(&m.source_pixels) {
            assert!((k.project(p).unwrap() - px).norm() <= 1e-9);
        }
    }

    #[test]
    fn level_model_dedups_and_scales() {
        let mut m = EdgeMap3D::default();
        let k = CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap();
        for x in 0..8 {
            let px = Pixel::new(10.0 + x as f64, 10.0);
            m.push(k.backproject(&px, 2.0).unwrap(), px, Vector2::new(0.0, 1.0));
        }
        let l1 = m.for_level(1);
        assert_eq!(l1.len(), 5);
        let k1 = k.scaled(1);
        for (p, px) in l1.points.iter().zip(&l1.source_pixels) {
            assert!((k1.project(p).unwrap() - px).norm() < 1e-9);
        }
    }
}
