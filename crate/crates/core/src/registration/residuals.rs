//! Point-to-tangent, oriented and distance-field residuals with their Jacobians.

use nalgebra::{Matrix3, RowVector2, RowVector6, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{warp_gradient_with, CameraIntrinsics, Pixel, Point3, Pose};
use crate::edges::{bin_center, orientation_bin, EdgeMap3D, PixelCoord};
use crate::error::{Error, Result};
use crate::fields::{DistanceField, EdgeField};

/// Fewest valid residuals a registration accepts.
pub const MIN_VALID_RESIDUALS: usize = 10;
/// Step of the central difference used for distance-field gradients.
const EDF_GRADIENT_STEP: f64 = 0.5;

/// One model point's residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualEntry {
    pub value: f64,
    pub valid: bool,
    /// Data pixel paired with the point (nearest-neighbour fields only).
    pub nn: Option<PixelCoord>,
    /// Unit direction the displacement is projected on (zero for distance fields).
    pub direction: Vector2<f64>,
    /// Reprojection of the model point, if it lies in front of the camera.
    pub projected: Option<Pixel>,
    /// Euclidean distance from the reprojection to `nn` (or the field distance).
    pub point_to_point: f64,
}

impl ResidualEntry {
    fn invalid(projected: Option<Pixel>, direction: Vector2<f64>) -> Self {
        Self {
            value: 0.0,
            valid: false,
            nn: None,
            direction,
            projected,
            point_to_point: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResidualVector {
    pub entries: Vec<ResidualEntry>,
}

impl ResidualVector {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.entries.iter().filter(|e| e.valid).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.valid_count() as f64 / self.entries.len() as f64
        }
    }

    pub fn valid_values(&self) -> Vec<f64> {
        self.entries.iter().filter(|e| e.valid).map(|e| e.value).collect()
    }

    /// Unweighted RMS over the valid entries.
    pub fn rms(&self) -> f64 {
        let v = self.valid_values();
        if v.is_empty() {
            return 0.0;
        }
        (v.iter().map(|r| r * r).sum::<f64>() / v.len() as f64).sqrt()
    }

    /// RMS of point-to-point distances over the valid entries.
    pub fn point_to_point_rms(&self) -> f64 {
        let v: Vec<f64> = self.entries.iter().filter(|e| e.valid).map(|e| e.point_to_point).collect();
        if v.is_empty() {
            return 0.0;
        }
        (v.iter().map(|r| r * r).sum::<f64>() / v.len() as f64).sqrt()
    }
}

/// Model gradients warped into the camera at `pose`.
pub fn warp_model_gradients(model: &EdgeMap3D, pose: &Pose, k: &CameraIntrinsics) -> Vec<Vector2<f64>> {
    let rt = pose.rotation().transpose();
    (0..model.len())
        .into_par_iter()
        .map(|i| warp_gradient_with(&rt, &pose.t, k, &model.source_pixels[i], &model.grad_dir[i], model.depths[i]))
        .collect()
}

/// Residuals with gradients warped at `pose`.
pub fn compute_residuals(model: &EdgeMap3D, pose: &Pose, field: &EdgeField, k: &CameraIntrinsics) -> Result<ResidualVector> {
    let g = warp_model_gradients(model, pose, k);
    compute_residuals_with_gradients(model, pose, field, k, &g)
}

/// Residuals with gradients warped at `pose`, without the overlap check.
pub fn evaluate_residuals_unchecked(
    model: &EdgeMap3D,
    pose: &Pose,
    field: &EdgeField,
    k: &CameraIntrinsics,
) -> ResidualVector {
    let g = warp_model_gradients(model, pose, k);
    evaluate_residuals(model, pose, field, k, &g)
}

/// Residuals with caller-supplied warped gradients; fails below
/// [`MIN_VALID_RESIDUALS`] valid entries.
pub fn compute_residuals_with_gradients(
    model: &EdgeMap3D,
    pose: &Pose,
    field: &EdgeField,
    k: &CameraIntrinsics,
    gradients: &[Vector2<f64>],
) -> Result<ResidualVector> {
    if model.is_empty() {
        return Err(Error::EmptyModel);
    }
    let res = evaluate_residuals(model, pose, field, k, gradients);
    let valid = res.valid_count();
    if valid < MIN_VALID_RESIDUALS {
        return Err(Error::InsufficientOverlap {
            valid,
            required: MIN_VALID_RESIDUALS,
        });
    }
    Ok(res)
}

/// Residuals without the overlap check.
pub(crate) fn evaluate_residuals(
    model: &EdgeMap3D,
    pose: &Pose,
    field: &EdgeField,
    k: &CameraIntrinsics,
    gradients: &[Vector2<f64>],
) -> ResidualVector {
    assert_eq!(gradients.len(), model.len(), "one warped gradient per model point");
    let rt = pose.rotation().transpose();
    let entries = model
        .points
        .par_iter()
        .zip(gradients.par_iter())
        .map(|(s, g)| residual_at(&(rt * (s - pose.t)), g, field, k))
        .collect();
    ResidualVector { entries }
}

fn residual_at(p: &Point3, g: &Vector2<f64>, field: &EdgeField, k: &CameraIntrinsics) -> ResidualEntry {
    if !(p.z > 0.0) {
        return ResidualEntry::invalid(None, Vector2::zeros());
    }
    let o = k.project_unchecked(p);
    if !o.x.is_finite() || !o.y.is_finite() {
        return ResidualEntry::invalid(None, Vector2::zeros());
    }
    let lookup = match field {
        EdgeField::Distance(f) => return edf_residual(f, o),
        EdgeField::Nearest(f) => f.nearest(&o).map(|n| (n, *g)),
        EdgeField::Oriented(f) => match orientation_bin(g) {
            Ok(b) => f.nearest(&o, b).map(|n| (n, bin_center(b))),
            Err(_) => return ResidualEntry::invalid(Some(o), Vector2::zeros()),
        },
    };
    match lookup {
        Ok((Some(n), dir)) => {
            let d = o - n.to_pixel();
            ResidualEntry {
                value: dir.dot(&d),
                valid: true,
                nn: Some(n),
                direction: dir,
                projected: Some(o),
                point_to_point: d.norm(),
            }
        }
        Ok((None, dir)) => ResidualEntry::invalid(Some(o), dir),
        Err(_) => ResidualEntry::invalid(Some(o), *g),
    }
}

fn edf_residual(f: &DistanceField, o: Pixel) -> ResidualEntry {
    match f.sample_bilinear(&o) {
        Ok(d) if d < f.truncation => ResidualEntry {
            value: d,
            valid: true,
            nn: None,
            direction: Vector2::zeros(),
            projected: Some(o),
            point_to_point: d,
        },
        _ => ResidualEntry::invalid(Some(o), Vector2::zeros()),
    }
}

/// Jacobian rows of the valid residuals, in entry order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Jacobian {
    /// Entry index each row belongs to.
    pub index: Vec<usize>,
    pub rows: Vec<RowVector6<f64>>,
}

/// Rotation and Cayley derivatives shared by all rows of one pose.
pub(crate) struct PoseDerivatives {
    rt: Matrix3<f64>,
    drt: [Matrix3<f64>; 3],
    t: Vector3<f64>,
}

impl PoseDerivatives {
    pub(crate) fn new(pose: &Pose) -> Self {
        let dr = pose.rot.derivatives();
        Self {
            rt: pose.rotation().transpose(),
            drt: dr.map(|d| d.transpose()),
            t: pose.t,
        }
    }

    /// `d pixel / d θ` for model point `s`.
    pub(crate) fn pixel_jacobian(&self, k: &CameraIntrinsics, s: &Point3) -> nalgebra::Matrix2x6<f64> {
        let d = s - self.t;
        let p = self.rt * d;
        let jp = k.projection_jacobian(&p);
        let mut jpt = nalgebra::Matrix3x6::zeros();
        jpt.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-self.rt));
        for (c, drt) in self.drt.iter().enumerate() {
            jpt.set_column(3 + c, &(drt * d));
        }
        jp * jpt
    }
}

/// Frozen-neighbour Jacobian `∂r/∂θ` of the valid residuals.
///
/// Nearest-neighbour fields use the stored projection direction; distance
/// fields use a central difference of the interpolated field.
pub fn compute_jacobian(
    model: &EdgeMap3D,
    pose: &Pose,
    residuals: &ResidualVector,
    field: &EdgeField,
    k: &CameraIntrinsics,
) -> Jacobian {
    let pd = PoseDerivatives::new(pose);
    let (index, rows): (Vec<usize>, Vec<RowVector6<f64>>) = residuals
        .entries
        .par_iter()
        .enumerate()
        .filter(|(_, e)| e.valid)
        .map(|(i, e)| {
            let jpix = pd.pixel_jacobian(k, &model.points[i]);
            let dir: RowVector2<f64> = match field {
                EdgeField::Distance(f) => edf_gradient(f, e.projected.expect("valid entries are projected")),
                _ => e.direction.transpose(),
            };
            (i, dir * jpix)
        })
        .unzip();
    Jacobian { index, rows }
}

fn edf_gradient(f: &DistanceField, o: Pixel) -> RowVector2<f64> {
    let (wmax, hmax) = ((f.width() - 1) as f64, (f.height() - 1) as f64);
    let h = EDF_GRADIENT_STEP;
    let diff = |a: Pixel, b: Pixel| {
        let (va, vb) = (f.sample_bilinear(&a), f.sample_bilinear(&b));
        match (va, vb) {
            (Ok(va), Ok(vb)) => (va - vb) / (a - b).norm(),
            _ => 0.0,
        }
    };
    let xp = Pixel::new((o.x + h).min(wmax), o.y);
    let xm = Pixel::new((o.x - h).max(0.0), o.y);
    let yp = Pixel::new(o.x, (o.y + h).min(hmax));
    let ym = Pixel::new(o.x, (o.y - h).max(0.0));
    RowVector2::new(diff(xp, xm), diff(yp, ym))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edges::EdgeMap2D;
    use crate::fields::{compute_annf, compute_edf, compute_onnf, Sampling};
    use approx::assert_relative_eq;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    /// Vertical edge at column 320 in the data image; model is the same edge at depth 2.
    fn vertical_edge() -> (EdgeMap3D, EdgeMap2D) {
        let k = cam();
        let mut data = EdgeMap2D::new(640, 480);
        let mut model = EdgeMap3D::default();
        for y in 100..380u32 {
            data.push(PixelCoord::new(320, y), Vector2::new(1.0, 0.0)).unwrap();
            let px = Pixel::new(320.0, y as f64);
            model.push(k.backproject(&px, 2.0).unwrap(), px, Vector2::new(1.0, 0.0));
        }
        (model, data)
    }

    fn shift_px(px: f64, axis: usize) -> Pose {
        // translating the camera by -d moves the image by +d * f / z
        let mut t = Vector3::zeros();
        t[axis] = -px * 2.0 / 500.0;
        Pose::new(t, Default::default())
    }

    #[test]
    fn ground_truth_gives_zero_residuals() {
        let (model, data) = vertical_edge();
        let field = EdgeField::Nearest(compute_annf(&data, 8.0).unwrap());
        let r = compute_residuals(&model, &Pose::identity(), &field, &cam()).unwrap();
        assert_eq!(r.valid_count(), model.len());
        assert!(r.entries.iter().all(|e| e.value.abs() < 1e-9));
    }

    #[test]
    fn normal_shift_gives_residual_two() {
        let (model, data) = vertical_edge();
        let field = EdgeField::Nearest(compute_annf(&data, 8.0).unwrap());
        let r = compute_residuals(&model, &shift_px(2.0, 0), &field, &cam()).unwrap();
        for e in r.entries.iter().filter(|e| e.valid) {
            assert_relative_eq!(e.value, 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn tangential_shift_slides() {
        let (model, data) = vertical_edge();
        let field = EdgeField::Nearest(compute_annf(&data, 8.0).unwrap());
        let r = compute_residuals(&model, &shift_px(2.0, 1), &field, &cam()).unwrap();
        assert!(r.rms() < 1e-9);
        // interior points find a neighbour on the same column; end points see the gap
        assert!(r.point_to_point_rms() > 0.0);
    }

    #[test]
    fn too_few_valid_residuals() {
        let (model, data) = vertical_edge();
        let field = EdgeField::Nearest(compute_annf(&data, 8.0).unwrap());
        let far = shift_px(100.0, 0);
        assert!(matches!(
            compute_residuals(&model, &far, &field, &cam()),
            Err(Error::InsufficientOverlap { valid: 0, .. })
        ));
    }

    #[test]
    fn onnf_pairs_within_bin() {
        let (model, mut data) = vertical_edge();
        // a distractor edge of the opposite polarity right next to the model
        for y in 100..380u32 {
            data.push(PixelCoord::new(321, y), Vector2::new(-1.0, 0.0)).unwrap();
        }
        let field = EdgeField::Oriented(compute_onnf(&data, 8.0, Sampling::Exact).unwrap());
        let r = compute_residuals(&model, &shift_px(0.6, 0), &field, &cam()).unwrap();
        for e in r.entries.iter().filter(|e| e.valid) {
            assert_eq!(e.nn.unwrap().x, 320);
        }
    }

    #[test]
    fn edf_residual_is_distance() {
        let (model, data) = vertical_edge();
        let field = EdgeField::Distance(compute_edf(&data, 8.0).unwrap());
        let r = compute_residuals(&model, &shift_px(1.5, 0), &field, &cam()).unwrap();
        for e in r.entries.iter().filter(|e| e.valid) {
            assert_relative_eq!(e.value, 1.5, epsilon = 1e-6);
        }
        let j = compute_jacobian(&model, &shift_px(1.5, 0), &r, &field, &cam());
        assert_eq!(j.rows.len(), r.valid_count());
        // the reprojection sits right of the edge; moving the camera in +x moves it left
        assert!(j.rows[50][0] < 0.0);
    }

    #[test]
    fn frozen_jacobian_matches_finite_differences() {
        let (model, data) = vertical_edge();
        let k = cam();
        let field = EdgeField::Nearest(compute_annf(&data, 30.0).unwrap());
        let pose = Pose::from_vector(&nalgebra::Vector6::new(0.003, -0.002, 0.01, 0.001, -0.0015, 0.002));
        let r = compute_residuals(&model, &pose, &field, &k).unwrap();
        let j = compute_jacobian(&model, &pose, &r, &field, &k);
        let frozen = |theta: &nalgebra::Vector6<f64>, i: usize| {
            let p = Pose::from_vector(theta).transform_to_frame(&model.points[i]);
            let e = &r.entries[i];
            e.direction.dot(&(k.project_unchecked(&p) - e.nn.unwrap().to_pixel()))
        };
        let theta = pose.to_vector();
        for (row, &i) in j.rows.iter().zip(&j.index) {
            for c in 0..6 {
                let mut a = theta;
                let mut b = theta;
                a[c] += 1e-6;
                b[c] -= 1e-6;
                let fd = (frozen(&a, i) - frozen(&b, i)) / 2e-6;
                assert!((fd - row[c]).abs() <= 1e-4 * fd.abs().max(1.0));
            }
        }
    }
}
