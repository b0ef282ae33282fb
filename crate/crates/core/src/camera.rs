//! Pinhole camera, Cayley rotations and rigid poses.
//!
//! A [`Pose`] holds the translation `t` and Cayley parameters `c` of a camera
//! expressed in some reference frame. A point `s` given in the reference frame
//! maps into the camera as `R(c)^T (s - t)`. Absolute (world) poses are kept as
//! [`Isometry3`] so that large rotations never pass through the Cayley
//! singularity; Cayley parameters are only used for local increments.

use std::fmt;
use std::path::Path;

use nalgebra::{Isometry3, Matrix2x3, Matrix3, Matrix3x6, Translation3, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;
/// Sub-pixel image location `(u, v)`; `u` grows to the right, `v` downwards.
pub type Pixel = Vector2<f64>;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of pyramid level `level`: all pixel quantities divided by `2^level`.
    pub fn scaled(&self, level: usize) -> Self {
        let s = (1u64 << level) as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width >> level,
            height: self.height >> level,
        }
    }

    pub fn pyramid(&self, levels: usize) -> Vec<Self> {
        (0..levels).map(|l| self.scaled(l)).collect()
    }

    pub fn project(&self, p: &Point3) -> Result<Pixel> {
        if !(p.z > 0.0) {
            return Err(Error::BehindCamera(p.z));
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, p: &Point3) -> Pixel {
        Pixel::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Point at depth `z` (not ray length) along the ray through `px`.
    pub fn backproject(&self, px: &Pixel, z: f64) -> Result<Point3> {
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::InvalidDepth(z));
        }
        Ok(Point3::new((px.x - self.cx) / self.fx * z, (px.y - self.cy) / self.fy * z, z))
    }

    /// True if `px` lies inside `[0, w-1] x [0, h-1]`.
    pub fn contains(&self, px: &Pixel) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= (self.width - 1) as f64 && px.y <= (self.height - 1) as f64
    }

    /// Derivative of the projection with respect to the camera-frame point.
    pub fn projection_jacobian(&self, p: &Point3) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }
}

/// Intrinsics plus the raw-depth scale, as read from a `key = value` file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraConfig {
    pub intrinsics: CameraIntrinsics,
    /// Raw 16-bit depth units per meter.
    pub depth_scale: f64,
}

impl Default for CameraConfig {
    /// Default Kinect parameters used by the TUM RGB-D benchmark tools.
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics {
                fx: 525.0,
                fy: 525.0,
                cx: 319.5,
                cy: 239.5,
                width: 640,
                height: 480,
            },
            depth_scale: 5000.0,
        }
    }
}

impl CameraConfig {
    /// Parses `fx, fy, cx, cy, width, height` and optional `depth_scale`.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut fx = None;
        let mut fy = None;
        let mut cx = None;
        let mut cy = None;
        let mut width = None;
        let mut height = None;
        let mut depth_scale = 5000.0;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let key = key.trim();
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("line {}: bad number for {key}", lineno + 1)))?;
            match key {
                "fx" => fx = Some(value),
                "fy" => fy = Some(value),
                "cx" => cx = Some(value),
                "cy" => cy = Some(value),
                "width" => width = Some(value as usize),
                "height" => height = Some(value as usize),
                "depth_scale" => depth_scale = value,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        let missing = |name: &str| Error::Config(format!("missing key {name:?}"));
        let intrinsics = CameraIntrinsics::new(
            fx.ok_or_else(|| missing("fx"))?,
            fy.ok_or_else(|| missing("fy"))?,
            cx.ok_or_else(|| missing("cx"))?,
            cy.ok_or_else(|| missing("cy"))?,
            width.ok_or_else(|| missing("width"))?,
            height.ok_or_else(|| missing("height"))?,
        )?;
        if !(depth_scale > 0.0) {
            return Err(Error::Config("depth_scale must be positive".into()));
        }
        Ok(Self {
            intrinsics,
            depth_scale,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Cayley rotation parameters `c = (c1, c2, c3)`.
///
/// Equivalent to a quaternion with vector part `c` and scalar part `1`; every
/// rotation except a half turn has exactly one representation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CayleyRotation {
    pub c: Vector3<f64>,
}

impl CayleyRotation {
    pub fn new(c1: f64, c2: f64, c3: f64) -> Self {
        Self {
            c: Vector3::new(c1, c2, c3),
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    /// Unnormalised rotation numerator `N(c)`, so that `R = N / (1 + |c|^2)`.
    fn numerator(&self) -> Matrix3<f64> {
        let (c1, c2, c3) = (self.c.x, self.c.y, self.c.z);
        Matrix3::new(
            1.0 + c1 * c1 - c2 * c2 - c3 * c3,
            2.0 * (c1 * c2 - c3),
            2.0 * (c1 * c3 + c2),
            2.0 * (c1 * c2 + c3),
            1.0 - c1 * c1 + c2 * c2 - c3 * c3,
            2.0 * (c2 * c3 - c1),
            2.0 * (c1 * c3 - c2),
            2.0 * (c2 * c3 + c1),
            1.0 - c1 * c1 - c2 * c2 + c3 * c3,
        )
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        self.numerator() / (1.0 + self.c.norm_squared())
    }

    /// `dR/dc_j` for `j = 0, 1, 2`.
    pub fn derivatives(&self) -> [Matrix3<f64>; 3] {
        let (c1, c2, c3) = (self.c.x, self.c.y, self.c.z);
        let k = 1.0 + self.c.norm_squared();
        let n = self.numerator();
        let dn = [
            Matrix3::new(2.0 * c1, 2.0 * c2, 2.0 * c3, 2.0 * c2, -2.0 * c1, -2.0, 2.0 * c3, 2.0, -2.0 * c1),
            Matrix3::new(-2.0 * c2, 2.0 * c1, 2.0, 2.0 * c1, 2.0 * c2, 2.0 * c3, -2.0, 2.0 * c3, -2.0 * c2),
            Matrix3::new(-2.0 * c3, -2.0, 2.0 * c1, 2.0, -2.0 * c3, 2.0 * c2, 2.0 * c1, 2.0 * c2, 2.0 * c3),
        ];
        let cs = [c1, c2, c3];
        std::array::from_fn(|j| dn[j] / k - n * (2.0 * cs[j] / (k * k)))
    }

    /// Fails for half-turn rotations, which have no Cayley representation.
    pub fn from_matrix(r: &Matrix3<f64>) -> Result<Self> {
        let q = UnitQuaternion::from_matrix(r);
        Self::from_quaternion(&q)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Result<Self> {
        let w = q.w;
        if w.abs() < 1e-12 {
            return Err(Error::CayleySingular);
        }
        Ok(Self {
            c: q.imag() / w,
        })
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(1.0, self.c.x, self.c.y, self.c.z))
    }
}

/// Free-function form of [`CayleyRotation::to_matrix`].
pub fn cayley_to_rotation(rot: &CayleyRotation) -> Matrix3<f64> {
    rot.to_matrix()
}

/// Camera pose `θ = [tx, ty, tz, c1, c2, c3]` relative to a reference frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub t: Vector3<f64>,
    pub rot: CayleyRotation,
}

impl Pose {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(t: Vector3<f64>, rot: CayleyRotation) -> Self {
        Self { t, rot }
    }

    pub fn from_vector(theta: &Vector6<f64>) -> Self {
        Self {
            t: Vector3::new(theta[0], theta[1], theta[2]),
            rot: CayleyRotation::new(theta[3], theta[4], theta[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.t.x, self.t.y, self.t.z, self.rot.c.x, self.rot.c.y, self.rot.c.z)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.rot.to_matrix()
    }

    /// Reference-frame point into this camera's frame: `R^T (s - t)`.
    pub fn transform_to_frame(&self, s: &Point3) -> Point3 {
        self.rotation().transpose() * (s - self.t)
    }

    /// Camera-to-reference rigid transform (`x_ref = R x_cam + t`).
    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.t), self.rot.to_quaternion())
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Result<Self> {
        Ok(Self {
            t: iso.translation.vector,
            rot: CayleyRotation::from_quaternion(&iso.rotation)?,
        })
    }

    /// `self ∘ other`: `other` is expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose) -> Result<Pose> {
        Pose::from_isometry(&(self.to_isometry() * other.to_isometry()))
    }

    pub fn inverse(&self) -> Result<Pose> {
        Pose::from_isometry(&self.to_isometry().inverse())
    }

    /// `d(R^T (s - t)) / dθ` evaluated at this pose.
    pub fn point_jacobian(&self, s: &Point3) -> Matrix3x6<f64> {
        let rt = self.rotation().transpose();
        let d = s - self.t;
        let dr = self.rot.derivatives();
        let mut j = Matrix3x6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rt));
        for (k, drk) in dr.iter().enumerate() {
            j.set_column(3 + k, &(drk.transpose() * d));
        }
        j
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t=({:.6}, {:.6}, {:.6}) c=({:.6}, {:.6}, {:.6})",
            self.t.x, self.t.y, self.t.z, self.rot.c.x, self.rot.c.y, self.rot.c.z
        )
    }
}

/// Free-function form of [`Pose::transform_to_frame`].
pub fn transform_to_frame(pose: &Pose, s: &Point3) -> Point3 {
    pose.transform_to_frame(s)
}

/// Pixel distance of the hallucinated point used by [`warp_gradient`].
const HALLUCINATION_STEP: f64 = 1.0;

/// Warps a reference-image gradient direction into the camera at `pose`.
///
/// A second point is placed one pixel along the gradient at the same depth;
/// both are moved into the current frame and the normalised image-plane
/// difference is returned. Degenerate configurations return the input.
pub fn warp_gradient(
    pose: &Pose,
    k: &CameraIntrinsics,
    model_pixel: &Pixel,
    model_gradient: &Vector2<f64>,
    depth: f64,
) -> Vector2<f64> {
    let rt = pose.rotation().transpose();
    warp_gradient_with(&rt, &pose.t, k, model_pixel, model_gradient, depth)
}

pub(crate) fn warp_gradient_with(
    rt: &Matrix3<f64>,
    t: &Vector3<f64>,
    k: &CameraIntrinsics,
    model_pixel: &Pixel,
    model_gradient: &Vector2<f64>,
    depth: f64,
) -> Vector2<f64> {
    let (Ok(s), Ok(h)) = (
        k.backproject(model_pixel, depth),
        k.backproject(&(model_pixel + model_gradient * HALLUCINATION_STEP), depth),
    ) else {
        return *model_gradient;
    };
    let (ps, ph) = (rt * (s - t), rt * (h - t));
    if !(ps.z > 0.0 && ph.z > 0.0) {
        return *model_gradient;
    }
    let d = k.project_unchecked(&ph) - k.project_unchecked(&ps);
    let n = d.norm();
    if !(n > 1e-12) {
        return *model_gradient;
    }
    d / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn vga() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn zero_cayley_is_identity() {
        assert_eq!(CayleyRotation::identity().to_matrix(), Matrix3::identity());
    }

    #[test]
    fn unit_c1_is_quarter_turn_about_x() {
        let r = CayleyRotation::new(1.0, 0.0, 0.0).to_matrix();
        let expected = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert_relative_eq!(r, expected, epsilon = 1e-15);
    }

    #[test]
    fn cayley_matches_quaternion_convention() {
        let c = CayleyRotation::new(0.3, -0.2, 0.7);
        let r1 = c.to_matrix();
        let r2 = c.to_quaternion().to_rotation_matrix().into_inner();
        assert_relative_eq!(r1, r2, epsilon = 1e-14);
        let back = CayleyRotation::from_matrix(&r1).unwrap();
        assert_relative_eq!(back.c, c.c, epsilon = 1e-12);
    }

    #[test]
    fn half_turn_is_singular() {
        let r = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        assert!(matches!(CayleyRotation::from_matrix(&r), Err(Error::CayleySingular)));
    }

    #[test]
    fn cayley_derivatives_match_finite_differences() {
        let c = CayleyRotation::new(0.4, -0.3, 0.25);
        let d = c.derivatives();
        let h = 1e-6;
        for j in 0..3 {
            let mut cp = c;
            let mut cm = c;
            cp.c[j] += h;
            cm.c[j] -= h;
            let fd = (cp.to_matrix() - cm.to_matrix()) / (2.0 * h);
            assert_relative_eq!(d[j], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn derivatives_at_zero_are_cross_product_generators() {
        // d(R)/dc_j at c = 0 equals 2 [e_j]x.
        let d = CayleyRotation::identity().derivatives();
        let gen = |v: Vector3<f64>| v.cross_matrix() * 2.0;
        assert_relative_eq!(d[0], gen(Vector3::x()));
        assert_relative_eq!(d[1], gen(Vector3::y()));
        assert_relative_eq!(d[2], gen(Vector3::z()));
    }

    #[test]
    fn project_examples() {
        let k = vga();
        assert_eq!(k.project(&Point3::new(0.0, 0.0, 218.75)).unwrap(), Pixel::new(320.0, 240.0));
        assert_relative_eq!(
            k.project(&Point3::new(43.75, 0.0, 218.75)).unwrap(),
            Pixel::new(420.0, 240.0),
            epsilon = 1e-12
        );
        assert!(matches!(k.project(&Point3::new(0.0, 0.0, -1.0)), Err(Error::BehindCamera(_))));
    }

    #[test]
    fn backproject_examples() {
        let k = vga();
        assert_eq!(k.backproject(&Pixel::new(320.0, 240.0), 2.0).unwrap(), Point3::new(0.0, 0.0, 2.0));
        assert_relative_eq!(
            k.backproject(&Pixel::new(420.0, 240.0), 218.75).unwrap(),
            Point3::new(43.75, 0.0, 218.75),
            epsilon = 1e-12
        );
        assert!(matches!(k.backproject(&Pixel::new(1.0, 1.0), 0.0), Err(Error::InvalidDepth(_))));
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn transform_examples() {
        let s = Point3::new(1.0, 0.0, 5.0);
        assert_eq!(Pose::identity().transform_to_frame(&s), s);
        let p = Pose::new(Vector3::new(1.0, 0.0, 0.0), CayleyRotation::identity());
        assert_eq!(p.transform_to_frame(&s), Point3::new(0.0, 0.0, 5.0));
    }

    #[test]
    fn scaled_projection_divides_by_level_factor() {
        let k = vga();
        let p = Point3::new(0.3, -0.2, 2.0);
        let base = k.project(&p).unwrap();
        for l in 1..3 {
            let px = k.scaled(l).project(&p).unwrap();
            assert_relative_eq!(px, base / (1 << l) as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn config_parsing() {
        let cfg = CameraConfig::parse("# kinect\nfx=500\nfy = 501\ncx=320\ncy=240\nwidth=640\nheight=480\ndepth_scale=1000\n").unwrap();
        assert_eq!(cfg.intrinsics.fy, 501.0);
        assert_eq!(cfg.depth_scale, 1000.0);
        assert!(CameraConfig::parse("fx=1\n").is_err());
        assert!(CameraConfig::parse("fx=1\nfy=1\ncx=1\ncy=1\nwidth=4\nheight=4\nbogus=2").is_err());
    }

    #[test]
    fn warp_identity_keeps_gradient() {
        let g = Vector2::new(0.6, 0.8);
        let w = warp_gradient(&Pose::identity(), &vga(), &Pixel::new(100.0, 50.0), &g, 3.0);
        assert_relative_eq!(w, g, epsilon = 1e-12);
    }

    #[test]
    fn warp_under_camera_roll_rotates_gradient() {
        // Camera rolled +90° about its optical axis: image content rotates by -90°.
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let roll = Pose::new(Vector3::zeros(), CayleyRotation::new(0.0, 0.0, 1.0));
        let g = Vector2::new(1.0, 0.0);
        let w = warp_gradient(&roll, &k, &Pixel::new(330.0, 250.0), &g, 2.0);
        // Oracle: rotate the image-plane vector by R^T directly.
        let expected = {
            let rt = roll.rotation().transpose();
            let v = rt * Vector3::new(1.0, 0.0, 0.0);
            Vector2::new(v.x, v.y)
        };
        assert_relative_eq!(w, expected, epsilon = 1e-9);
        assert_relative_eq!(w, Vector2::new(0.0, -1.0), epsilon = 1e-9);
    }

    #[test]
    fn warp_under_parallel_translation_keeps_gradient() {
        let k = vga();
        let pose = Pose::new(Vector3::new(0.2, -0.1, 0.0), CayleyRotation::identity());
        let g = Vector2::new(0.8, -0.6);
        let w = warp_gradient(&pose, &k, &Pixel::new(200.0, 300.0), &g, 4.0);
        assert_relative_eq!(w, g, epsilon = 1e-6);
    }

    proptest! {
        #[test]
        fn cayley_is_orthonormal(c1 in -5.0..5.0f64, c2 in -5.0..5.0f64, c3 in -5.0..5.0f64) {
            let r = CayleyRotation::new(c1, c2, c3).to_matrix();
            let e = r.transpose() * r - Matrix3::identity();
            prop_assert!(e.amax() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn project_backproject_roundtrip(u in 0.0..639.0f64, v in 0.0..479.0f64, z in 0.1..1.0e4f64) {
            let k = vga();
            let px = Pixel::new(u, v);
            let p = k.backproject(&px, z).unwrap();
            prop_assert_eq!(p.z, z);
            let back = k.project(&p).unwrap();
            prop_assert!((back - px).norm() < 1e-9);
        }

        #[test]
        fn transform_is_isometry(
            t in prop::array::uniform3(-3.0..3.0f64),
            c in prop::array::uniform3(-1.0..1.0f64),
            a in prop::array::uniform3(-10.0..10.0f64),
            b in prop::array::uniform3(-10.0..10.0f64),
        ) {
            let pose = Pose::new(Vector3::from(t), CayleyRotation::new(c[0], c[1], c[2]));
            let (a, b) = (Vector3::from(a), Vector3::from(b));
            let d0 = (a - b).norm();
            let d1 = (pose.transform_to_frame(&a) - pose.transform_to_frame(&b)).norm();
            prop_assert!((d0 - d1).abs() < 1e-10);
            // inverse pose undoes the transform
            let inv = pose.inverse().unwrap();
            let back = inv.transform_to_frame(&pose.transform_to_frame(&a));
            prop_assert!((back - a).norm() < 1e-10);
        }
    }
}
