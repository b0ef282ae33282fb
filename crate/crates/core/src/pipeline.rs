//! Frame-to-reference tracking with reference switching, point culling, a
//! decaying velocity model and an asynchronous reference preparer.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use log::{debug, info, warn};
use nalgebra::Isometry3;

use crate::camera::{CameraIntrinsics, Pose};
use crate::edges::{build_edge_map_3d, detect_edges, EdgeMap2D, EdgeMap3D};
use crate::error::{Error, Result};
use crate::fields::{compute_annf, EdgeField, NnField};
use crate::grid::{image_pyramid, DepthImage, GrayImage};
use crate::registration::{evaluate_residuals_unchecked, pyramid_register, PyramidReport, SolverConfig, WeightFunction};

pub const DEFAULT_MAX_POINTS: usize = 6500;
pub const DEFAULT_ALPHA: f64 = 0.9;
pub const DEFAULT_DISPARITY_THRESHOLD: f64 = 3.0;
pub const DEFAULT_MIN_VALID_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub solver: SolverConfig,
    pub weight: WeightFunction,
    /// Decay of the velocity model.
    pub alpha: f64,
    /// Median disparity (px) above which a new reference is created.
    pub disparity_threshold: f64,
    /// Valid-residual fraction below which a new reference is created.
    pub min_valid_fraction: f64,
    pub max_points: usize,
    pub switch_references: bool,
    /// Prepare references on a background thread.
    pub asynchronous: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            weight: WeightFunction::default(),
            alpha: DEFAULT_ALPHA,
            disparity_threshold: DEFAULT_DISPARITY_THRESHOLD,
            min_valid_fraction: DEFAULT_MIN_VALID_FRACTION,
            max_points: DEFAULT_MAX_POINTS,
            switch_references: true,
            asynchronous: false,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.disparity_threshold > 0.0) || !(0.0..=1.0).contains(&self.min_valid_fraction) {
            return Err(Error::Config("invalid reference switching thresholds".into()));
        }
        if self.max_points == 0 {
            return Err(Error::Config("max_points must be positive".into()));
        }
        if !self.weight.is_valid() {
            return Err(Error::Config(format!("invalid weight function {:?}", self.weight)));
        }
        Ok(())
    }
}

/// A keyframe: its 3D edge model per pyramid level and its own level-0
/// nearest-neighbour field (used to cull the next reference).
#[derive(Debug, Clone)]
pub struct ReferenceFrame {
    /// Camera-to-world transform.
    pub pose: Isometry3<f64>,
    pub timestamp: f64,
    pub models: Vec<EdgeMap3D>,
    pub field: NnField,
}

impl ReferenceFrame {
    pub fn model(&self) -> &EdgeMap3D {
        &self.models[0]
    }
}

/// Decaying constant-velocity prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionModel {
    pub alpha: f64,
    /// Last frame-to-frame motion, expressed in the previous camera.
    pub last_motion: Option<Isometry3<f64>>,
}

impl MotionModel {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, last_motion: None }
    }

    /// Motion scaled by `alpha`: translation linearly, Cayley parameters linearly.
    pub fn scaled_motion(&self) -> Isometry3<f64> {
        let Some(m) = self.last_motion else {
            return Isometry3::identity();
        };
        match Pose::from_isometry(&m) {
            Ok(p) => {
                let mut v = p.to_vector();
                v *= self.alpha;
                Pose::from_vector(&v).to_isometry()
            }
            Err(_) => Isometry3::identity(),
        }
    }

    pub fn predict(&self, last: &Isometry3<f64>) -> Isometry3<f64> {
        last * self.scaled_motion()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingQuality {
    /// Median distance between reference edge pixels and their reprojections.
    pub median_disparity: f64,
    pub valid_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrackingStatus {
    Ok,
    /// Registration failed; the pose is the prediction.
    Lost(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub pose: Isometry3<f64>,
    pub quality: Option<TrackingQuality>,
    pub status: TrackingStatus,
    /// This frame became a reference.
    pub keyframe: bool,
}

/// Decision rule for creating a new reference frame.
pub fn should_switch_reference(quality: &TrackingQuality, disparity_threshold: f64, min_valid_fraction: f64) -> bool {
    quality.median_disparity > disparity_threshold || quality.valid_fraction < min_valid_fraction
}

/// Keeps the `ceil(N/2)` points with the smallest point-to-point residuals
/// when reprojected into `nearest` (a stable sort; invalid points rank last).
///
/// `relative` is the pose of the nearest reference's camera in the new model's frame.
pub fn cull_points(
    model: &EdgeMap3D,
    nearest: &ReferenceFrame,
    relative: &Pose,
    k: &CameraIntrinsics,
) -> EdgeMap3D {
    let n = model.len();
    if n == 0 {
        return model.clone();
    }
    let field = EdgeField::Nearest(nearest.field.clone());
    let res = evaluate_residuals_unchecked(model, relative, &field, k);
    let mut order: Vec<usize> = (0..n).collect();
    let key = |i: usize| {
        let e = &res.entries[i];
        if e.valid {
            e.point_to_point
        } else {
            f64::INFINITY
        }
    };
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
    let mut keep: Vec<usize> = order[..n.div_ceil(2)].to_vec();
    keep.sort_unstable();
    model.select(&keep)
}

/// Per-level edge maps of one gray image.
pub fn edge_pyramid(gray: &GrayImage, levels: usize) -> Result<Vec<EdgeMap2D>> {
    image_pyramid(gray, levels).iter().map(|g| detect_edges(g, None)).collect()
}

/// Per-level fields of the configured kind and truncation.
pub fn field_pyramid(edges: &[EdgeMap2D], cfg: &SolverConfig) -> Result<Vec<EdgeField>> {
    edges
        .iter()
        .enumerate()
        .map(|(l, e)| EdgeField::build(e, cfg.field, cfg.truncation_at(l), cfg.sampling))
        .collect()
}

/// Builds a reference frame from an RGB-D pair; culls against `nearest` when given.
pub fn create_reference_frame(
    gray: &GrayImage,
    depth: &DepthImage,
    pose: Isometry3<f64>,
    timestamp: f64,
    k: &CameraIntrinsics,
    nearest: Option<(&ReferenceFrame, Pose)>,
    cfg: &TrackerConfig,
) -> Result<ReferenceFrame> {
    let edges = detect_edges(gray, None)?;
    let mut model = build_edge_map_3d(&edges, depth, k, cfg.max_points)?;
    if let Some((near, rel)) = nearest {
        let before = model.len();
        model = cull_points(&model, near, &rel, k);
        debug!("culled reference model {before} -> {}", model.len());
    }
    if model.is_empty() || edges.is_empty() {
        return Err(Error::EmptyModel);
    }
    let field = compute_annf(&edges, cfg.solver.truncation_at(0))?;
    let models = model.pyramid(cfg.solver.levels);
    if models.iter().any(|m| m.is_empty()) {
        return Err(Error::EmptyModel);
    }
    Ok(ReferenceFrame {
        pose,
        timestamp,
        models,
        field,
    })
}

/// Median reprojection disparity of the level-0 model under `relative`.
pub fn median_disparity(model: &EdgeMap3D, relative: &Pose, k: &CameraIntrinsics) -> f64 {
    let mut d: Vec<f64> = model
        .points
        .iter()
        .zip(&model.source_pixels)
        .filter_map(|(s, px)| k.project(&relative.transform_to_frame(s)).ok().map(|o| (o - px).norm()))
        .collect();
    if d.is_empty() {
        return f64::INFINITY;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

struct ReferenceJob {
    gray: GrayImage,
    depth: DepthImage,
    pose: Isometry3<f64>,
    timestamp: f64,
    nearest: Arc<ReferenceFrame>,
    relative: Pose,
}

/// Background worker that turns RGB-D frames into reference frames.
struct Preparer {
    jobs: Option<Sender<ReferenceJob>>,
    results: Receiver<Result<ReferenceFrame>>,
    handle: Option<JoinHandle<()>>,
}

impl Preparer {
    fn spawn(k: CameraIntrinsics, cfg: TrackerConfig) -> Self {
        let (job_tx, job_rx) = channel::<ReferenceJob>();
        let (res_tx, res_rx) = channel();
        let handle = std::thread::spawn(move || {
            for job in job_rx {
                let r = create_reference_frame(
                    &job.gray,
                    &job.depth,
                    job.pose,
                    job.timestamp,
                    &k,
                    Some((&job.nearest, job.relative)),
                    &cfg,
                );
                if res_tx.send(r).is_err() {
                    break;
                }
            }
        });
        Self {
            jobs: Some(job_tx),
            results: res_rx,
            handle: Some(handle),
        }
    }
}

impl Drop for Preparer {
    fn drop(&mut self) {
        self.jobs.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// The visual odometry front end.
pub struct Tracker {
    cfg: TrackerConfig,
    k: CameraIntrinsics,
    ks: Vec<CameraIntrinsics>,
    reference: Option<Arc<ReferenceFrame>>,
    keyframes: Vec<Arc<ReferenceFrame>>,
    motion: MotionModel,
    last_pose: Isometry3<f64>,
    trajectory: Vec<TrajectoryEntry>,
    preparer: Option<Preparer>,
    pending: bool,
    last_report: Option<PyramidReport>,
}

impl Tracker {
    pub fn new(k: CameraIntrinsics, cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let preparer = cfg.asynchronous.then(|| Preparer::spawn(k, cfg.clone()));
        Ok(Self {
            ks: k.pyramid(cfg.solver.levels),
            k,
            reference: None,
            keyframes: Vec::new(),
            motion: MotionModel::new(cfg.alpha),
            last_pose: Isometry3::identity(),
            trajectory: Vec::new(),
            preparer,
            pending: false,
            last_report: None,
            cfg,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn trajectory(&self) -> &[TrajectoryEntry] {
        &self.trajectory
    }

    pub fn reference(&self) -> Option<&Arc<ReferenceFrame>> {
        self.reference.as_ref()
    }

    /// Every reference frame created so far, oldest first.
    pub fn keyframes(&self) -> &[Arc<ReferenceFrame>] {
        &self.keyframes
    }

    pub fn motion_model(&self) -> &MotionModel {
        &self.motion
    }

    pub fn last_report(&self) -> Option<&PyramidReport> {
        self.last_report.as_ref()
    }

    /// World pose predicted for the next frame.
    pub fn predict_pose(&self) -> Isometry3<f64> {
        self.motion.predict(&self.last_pose)
    }

    fn install_reference(&mut self, r: ReferenceFrame) {
        let r = Arc::new(r);
        info!("new reference at t={:.6} with {} points", r.timestamp, r.model().len());
        self.keyframes.push(r.clone());
        self.reference = Some(r);
    }

    fn accept_prepared(&mut self, r: Result<ReferenceFrame>) {
        self.pending = false;
        match r {
            Ok(frame) => self.install_reference(frame),
            Err(e) => warn!("reference preparation failed: {e}"),
        }
    }

    fn poll_preparer(&mut self) {
        while let Some(r) = self.preparer.as_ref().and_then(|p| p.results.try_recv().ok()) {
            self.accept_prepared(r);
        }
    }

    /// Blocks until an in-flight reference has been published.
    pub fn flush(&mut self) {
        if !self.pending {
            return;
        }
        if let Some(r) = self.preparer.as_ref().and_then(|p| p.results.recv().ok()) {
            self.accept_prepared(r);
        }
    }

    /// Tracks one frame. `depth` is only used if the frame becomes a reference.
    pub fn track_frame(
        &mut self,
        gray: &GrayImage,
        depth: &DepthImage,
        timestamp: f64,
    ) -> Result<&TrajectoryEntry> {
        if let Some(last) = self.trajectory.last() {
            if !(timestamp > last.timestamp) {
                return Err(Error::Dataset(format!(
                    "timestamp {timestamp} does not follow {}",
                    last.timestamp
                )));
            }
        }
        self.poll_preparer();

        let Some(reference) = self.reference.clone() else {
            let r = create_reference_frame(gray, depth, Isometry3::identity(), timestamp, &self.k, None, &self.cfg)?;
            self.install_reference(r);
            self.trajectory.push(TrajectoryEntry {
                timestamp,
                pose: Isometry3::identity(),
                quality: Some(TrackingQuality {
                    median_disparity: 0.0,
                    valid_fraction: 1.0,
                }),
                status: TrackingStatus::Ok,
                keyframe: true,
            });
            return Ok(self.trajectory.last().expect("just pushed"));
        };

        let predicted = self.predict_pose();
        let outcome = self.register(&reference, gray, &predicted);
        let entry = match outcome {
            Ok((rel, report)) => {
                let world = reference.pose * rel.to_isometry();
                let quality = TrackingQuality {
                    median_disparity: median_disparity(reference.model(), &rel, &self.k),
                    valid_fraction: report.finest().residuals.valid_fraction(),
                };
                self.motion.last_motion = Some(self.last_pose.inverse() * world);
                self.last_pose = world;
                self.last_report = Some(report);
                let switch = self.cfg.switch_references
                    && should_switch_reference(&quality, self.cfg.disparity_threshold, self.cfg.min_valid_fraction);
                let keyframe = switch && self.switch_reference(&reference, gray, depth, world, timestamp, &rel);
                TrajectoryEntry {
                    timestamp,
                    pose: world,
                    quality: Some(quality),
                    status: TrackingStatus::Ok,
                    keyframe,
                }
            }
            Err(e) => {
                warn!("tracking lost at t={timestamp:.6}: {e}");
                self.last_pose = predicted;
                self.last_report = None;
                TrajectoryEntry {
                    timestamp,
                    pose: predicted,
                    quality: None,
                    status: TrackingStatus::Lost(e.to_string()),
                    keyframe: false,
                }
            }
        };
        self.trajectory.push(entry);
        Ok(self.trajectory.last().expect("just pushed"))
    }

    fn register(
        &self,
        reference: &ReferenceFrame,
        gray: &GrayImage,
        predicted: &Isometry3<f64>,
    ) -> Result<(Pose, PyramidReport)> {
        let levels = self.cfg.solver.levels;
        let edges = edge_pyramid(gray, levels)?;
        if edges[0].is_empty() {
            return Err(Error::EmptyField);
        }
        let fields = field_pyramid(&edges, &self.cfg.solver)?;
        let init = Pose::from_isometry(&(reference.pose.inverse() * predicted))?;
        let report = pyramid_register(&reference.models, &fields, &self.ks, &init, &self.cfg.weight, &self.cfg.solver)?;
        Ok((report.pose, report))
    }

    /// Starts (or runs) reference creation; true if a new reference was installed now.
    fn switch_reference(
        &mut self,
        reference: &Arc<ReferenceFrame>,
        gray: &GrayImage,
        depth: &DepthImage,
        world: Isometry3<f64>,
        timestamp: f64,
        rel: &Pose,
    ) -> bool {
        let relative = match rel.inverse() {
            Ok(r) => r,
            Err(e) => {
                warn!("cannot invert relative pose: {e}");
                return false;
            }
        };
        if let Some(p) = &self.preparer {
            if self.pending {
                return false;
            }
            let job = ReferenceJob {
                gray: gray.clone(),
                depth: depth.clone(),
                pose: world,
                timestamp,
                nearest: reference.clone(),
                relative,
            };
            if p.jobs.as_ref().is_some_and(|tx| tx.send(job).is_ok()) {
                self.pending = true;
            }
            return false;
        }
        match create_reference_frame(gray, depth, world, timestamp, &self.k, Some((reference, relative)), &self.cfg) {
            Ok(r) => {
                self.install_reference(r);
                true
            }
            Err(e) => {
                warn!("reference creation failed at t={timestamp:.6}: {e}");
                false
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CayleyRotation;
    use crate::synthetic::RenderScene;
    use nalgebra::{Translation3, UnitQuaternion, Vector3};

    fn small_cam() -> CameraIntrinsics {
        CameraIntrinsics::new(262.5, 262.5, 159.75, 119.75, 320, 240).unwrap()
    }

    #[test]
    fn prediction_without_history_is_last_pose() {
        let m = MotionModel::new(0.9);
        let last = Isometry3::from_parts(Translation3::new(1.0, 2.0, 3.0), UnitQuaternion::identity());
        assert_eq!(m.predict(&last), last);
    }

    #[test]
    fn alpha_one_extrapolates_and_alpha_zero_holds() {
        let step = Isometry3::from_parts(
            Translation3::new(0.1, 0.0, -0.05),
            UnitQuaternion::from_euler_angles(0.01, 0.02, -0.01),
        );
        let last = step * step;
        let mut m = MotionModel::new(1.0);
        m.last_motion = Some(step);
        let p = m.predict(&last);
        let expected = last * step;
        assert!((p.translation.vector - expected.translation.vector).norm() < 1e-12);
        assert!(p.rotation.angle_to(&expected.rotation) < 1e-12);
        m.alpha = 0.0;
        assert_eq!(m.predict(&last), last);
    }

    #[test]
    fn scaled_motion_halves_parameters() {
        let motion = Pose::new(Vector3::new(0.2, 0.0, 0.0), CayleyRotation::new(0.0, 0.1, 0.0));
        let mut m = MotionModel::new(0.5);
        m.last_motion = Some(motion.to_isometry());
        let s = Pose::from_isometry(&m.scaled_motion()).unwrap();
        assert!((s.t - Vector3::new(0.1, 0.0, 0.0)).norm() < 1e-12);
        assert!((s.rot.c - Vector3::new(0.0, 0.05, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn switching_rule() {
        let q = |d, f| TrackingQuality {
            median_disparity: d,
            valid_fraction: f,
        };
        assert!(!should_switch_reference(&q(0.0, 1.0), 3.0, 0.5));
        assert!(should_switch_reference(&q(4.0, 1.0), 3.0, 0.5));
        assert!(!should_switch_reference(&q(3.0, 1.0), 3.0, 0.5));
        assert!(should_switch_reference(&q(0.0, 0.3), 3.0, 0.5));
    }

    #[test]
    fn identical_frame_tracks_to_identity() {
        let k = small_cam();
        let (gray, depth) = RenderScene::desk().render(&Pose::identity(), &k);
        let mut t = Tracker::new(k, TrackerConfig::default()).unwrap();
        t.track_frame(&gray, &depth, 0.0).unwrap();
        let e = t.track_frame(&gray, &depth, 0.1).unwrap().clone();
        assert_eq!(e.status, TrackingStatus::Ok);
        assert!(e.quality.unwrap().median_disparity < 0.01);
        assert!(e.pose.translation.vector.norm() < 1e-6);
    }

    #[test]
    fn black_frame_is_lost() {
        let k = small_cam();
        let (gray, depth) = RenderScene::desk().render(&Pose::identity(), &k);
        let mut t = Tracker::new(k, TrackerConfig::default()).unwrap();
        t.track_frame(&gray, &depth, 0.0).unwrap();
        let black = GrayImage::new(320, 240, 0.0);
        let e = t.track_frame(&black, &depth, 0.1).unwrap();
        assert!(matches!(e.status, TrackingStatus::Lost(_)));
        assert_eq!(e.pose, Isometry3::identity());
    }

    #[test]
    fn timestamps_must_increase() {
        let k = small_cam();
        let (gray, depth) = RenderScene::desk().render(&Pose::identity(), &k);
        let mut t = Tracker::new(k, TrackerConfig::default()).unwrap();
        t.track_frame(&gray, &depth, 1.0).unwrap();
        assert!(t.track_frame(&gray, &depth, 1.0).is_err());
    }

    #[test]
    fn first_frame_keeps_full_model() {
        let k = small_cam();
        let (gray, depth) = RenderScene::desk().render(&Pose::identity(), &k);
        let cfg = TrackerConfig::default();
        let r = create_reference_frame(&gray, &depth, Isometry3::identity(), 0.0, &k, None, &cfg).unwrap();
        let edges = detect_edges(&gray, None).unwrap();
        let full = build_edge_map_3d(&edges, &depth, &k, cfg.max_points).unwrap();
        assert_eq!(r.model().len(), full.len());
        for p in &r.model().points {
            assert!(k.contains(&k.project(p).unwrap()));
        }
    }

    #[test]
    fn culling_keeps_half_and_drops_corrupted() {
        let k = small_cam();
        let (gray, depth) = RenderScene::desk().render(&Pose::identity(), &k);
        let cfg = TrackerConfig::default();
        let near = create_reference_frame(&gray, &depth, Isometry3::identity(), 0.0, &k, None, &cfg).unwrap();
        // the nearest reference sits 18 cm away, diagonally
        let rel = Pose::new(Vector3::new(0.15, 0.1, 0.0), CayleyRotation::identity());
        let (gray2, depth2) = RenderScene::desk().render(&rel.inverse().unwrap(), &k);
        let edges = detect_edges(&gray2, None).unwrap();
        let clean = build_edge_map_3d(&edges, &depth2, &k, cfg.max_points).unwrap();
        let n = clean.len();
        assert_eq!(cull_points(&clean, &near, &rel, &k).len(), n.div_ceil(2));

        let mut corrupted = clean.clone();
        for i in (0..n).step_by(2) {
            let z = corrupted.depths[i] + 0.5;
            let p = k.backproject(&corrupted.source_pixels[i], z).unwrap();
            corrupted.points[i] = p;
            corrupted.depths[i] = z;
        }
        let kept = cull_points(&corrupted, &near, &rel, &k);
        let bad = kept.depths.iter().zip(&kept.source_pixels).filter(|(z, px)| {
            let i = clean.source_pixels.iter().position(|q| q == *px).unwrap();
            (**z - clean.depths[i]).abs() > 0.25
        });
        assert!((bad.count() as f64) < 0.25 * kept.len() as f64);
    }
}
