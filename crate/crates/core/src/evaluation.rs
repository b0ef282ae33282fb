//! Trajectory metrics and controlled synthetic experiments.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{Isometry3, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::camera::{CameraIntrinsics, CayleyRotation, Pixel, Point3, Pose};
use crate::edges::{EdgeMap2D, EdgeMap3D, PixelCoord};
use crate::error::{Error, Result};
use crate::fields::{EdgeField, FieldKind, Sampling, DEFAULT_TRUNCATION};
use crate::registration::{pyramid_register, DegeneracyPolicy, SolverConfig, WeightFunction};

/// Timestamp tolerance used to pair estimated and reference poses.
pub const ASSOCIATION_MAX_DT: f64 = 0.02;

/// Poses with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    entries: Vec<(f64, Isometry3<f64>)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Isometry3<f64>)>) -> Result<Self> {
        if entries.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Evaluation("trajectory timestamps must strictly increase".into()));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, Isometry3<f64>)> {
        self.entries.iter()
    }

    pub fn entries(&self) -> &[(f64, Isometry3<f64>)] {
        &self.entries
    }

    /// Entry closest in time to `t`, if within `max_dt`.
    pub fn nearest(&self, t: f64, max_dt: f64) -> Option<(f64, Isometry3<f64>)> {
        let i = self.entries.partition_point(|e| e.0 < t);
        [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter_map(|j| self.entries.get(j))
            .filter(|e| (e.0 - t).abs() <= max_dt)
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
            .copied()
    }

    /// Every pose left-multiplied by `s`.
    pub fn transformed(&self, s: &Isometry3<f64>) -> Self {
        Self {
            entries: self.entries.iter().map(|(t, p)| (*t, s * p)).collect(),
        }
    }
}

/// `(t, est, gt)` triples in estimate order.
fn associate_poses(est: &Trajectory, gt: &Trajectory) -> Vec<(f64, Isometry3<f64>, Isometry3<f64>)> {
    est.iter()
        .filter_map(|(t, e)| gt.nearest(*t, ASSOCIATION_MAX_DT).map(|(_, g)| (*t, *e, g)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rpe {
    pub rotation_deg_per_s: f64,
    pub translation_m_per_s: f64,
    pub intervals: usize,
}

/// Relative pose error RMSE over intervals of about `delta` seconds,
/// normalised by each interval's duration.
pub fn compute_rpe(est: &Trajectory, gt: &Trajectory, delta: f64) -> Result<Rpe> {
    if !(delta > 0.0) {
        return Err(Error::Evaluation("delta must be positive".into()));
    }
    let pairs = associate_poses(est, gt);
    if pairs.len() < 2 {
        return Err(Error::Evaluation("fewer than two associated poses".into()));
    }
    let (mut sr, mut st, mut n) = (0.0, 0.0, 0usize);
    for i in 0..pairs.len() - 1 {
        let target = pairs[i].0 + delta;
        let j = (i + 1..pairs.len())
            .min_by(|&a, &b| (pairs[a].0 - target).abs().total_cmp(&(pairs[b].0 - target).abs()))
            .expect("non-empty range");
        let dt = pairs[j].0 - pairs[i].0;
        let rel_gt = pairs[i].2.inverse() * pairs[j].2;
        let rel_est = pairs[i].1.inverse() * pairs[j].1;
        let err = rel_gt.inverse() * rel_est;
        let rot = err.rotation.angle().to_degrees() / dt;
        let tr = err.translation.vector.norm() / dt;
        sr += rot * rot;
        st += tr * tr;
        n += 1;
    }
    Ok(Rpe {
        rotation_deg_per_s: (sr / n as f64).sqrt(),
        translation_m_per_s: (st / n as f64).sqrt(),
        intervals: n,
    })
}

/// Rigid (no scale) least-squares alignment `R a + t ≈ b`.
pub fn align_rigid(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<Isometry3<f64>> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::Evaluation("alignment needs at least three pairs".into()));
    }
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let mut cov_a = Matrix3::zeros();
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        cov_a += (p - ca) * (p - ca).transpose();
        h += (q - cb) * (p - ca).transpose();
    }
    let sv = cov_a.symmetric_eigen().eigenvalues;
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    if !(s[0] > 0.0) || s[1] <= 1e-12 * s[0] {
        return Err(Error::Evaluation("degenerate (collinear) positions".into()));
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let rot = nalgebra::Rotation3::from_matrix_unchecked(r);
    let t = cb - r * ca;
    Ok(Isometry3::from_parts(t.into(), nalgebra::UnitQuaternion::from_rotation_matrix(&rot)))
}

/// Absolute trajectory error: positional RMSE after rigid alignment.
pub fn compute_ate(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let pairs = associate_poses(est, gt);
    if pairs.len() < 3 {
        return Err(Error::Evaluation("fewer than three associated poses".into()));
    }
    let a: Vec<Vector3<f64>> = pairs.iter().map(|p| p.1.translation.vector).collect();
    let b: Vec<Vector3<f64>> = pairs.iter().map(|p| p.2.translation.vector).collect();
    let align = align_rigid(&a, &b)?;
    if a == b {
        return Ok(0.0);
    }
    let sum: f64 = a
        .iter()
        .zip(&b)
        .map(|(p, q)| (align.transform_point(&(*p).into()).coords - q).norm_squared())
        .sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// Mean image distance between reprojections of `model` under two poses.
pub fn mean_disparity(model: &EdgeMap3D, k: &CameraIntrinsics, a: &Pose, b: &Pose) -> f64 {
    let d: Vec<f64> = disparities(model, k, a, b).collect();
    d.iter().sum::<f64>() / d.len().max(1) as f64
}

/// RMS image distance between reprojections of `model` under two poses.
pub fn reprojection_rmse(model: &EdgeMap3D, k: &CameraIntrinsics, a: &Pose, b: &Pose) -> f64 {
    let d: Vec<f64> = disparities(model, k, a, b).collect();
    (d.iter().map(|x| x * x).sum::<f64>() / d.len().max(1) as f64).sqrt()
}

fn disparities<'a>(model: &'a EdgeMap3D, k: &'a CameraIntrinsics, a: &'a Pose, b: &'a Pose) -> impl Iterator<Item = f64> + 'a {
    let (ra, rb) = (a.rotation().transpose(), b.rotation().transpose());
    model.points.iter().filter_map(move |s| {
        let (pa, pb) = (ra * (s - a.t), rb * (s - b.t));
        (pa.z > 0.0 && pb.z > 0.0).then(|| (k.project_unchecked(&pa) - k.project_unchecked(&pb)).norm())
    })
}

/// Uniform random pose: translation in a ball of `max_t`, rotation angle up to `max_deg`.
pub fn random_perturbation(rng: &mut impl Rng, max_t: f64, max_deg: f64) -> Pose {
    let unit = |rng: &mut dyn rand::RngCore| loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-6 && n <= 1.0 {
            return v;
        }
    };
    let t = unit(rng) * max_t;
    let axis = unit(rng).normalize();
    let angle = rng.gen_range(0.0..=max_deg).to_radians();
    Pose::new(t, CayleyRotation { c: axis * (angle / 2.0).tan() })
}

/// Random arcs are redrawn until at least this share projects into the image.
const MIN_VISIBLE_ARC: f64 = 0.5;

/// Settings of the partial-observation bias study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasExperimentConfig {
    pub rank_threshold: f64,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    /// Camera height above the circle's plane.
    pub camera_height: f64,
    pub radius: f64,
    /// Observed arc length in radians.
    pub arc: f64,
    pub trials: usize,
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    pub methods: Vec<FieldKind>,
    pub seed: u64,
    pub levels: usize,
    pub truncation: Vec<f64>,
}

impl Default for BiasExperimentConfig {
    fn default() -> Self {
        Self {
            rank_threshold: 1e-4,
            focal: 500.0,
            width: 640,
            height: 480,
            camera_height: 218.75,
            radius: 140.0,
            arc: PI / 4.0,
            trials: 1000,
            max_translation: 5.0,
            max_rotation_deg: 2.0,
            methods: FieldKind::ALL.to_vec(),
            seed: 7,
            levels: 3,
            truncation: DEFAULT_TRUNCATION.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasTrial {
    pub trial: usize,
    pub method: FieldKind,
    /// `‖t_est - t_gt‖`; failed registrations keep the initial pose.
    pub error: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasSummary {
    pub method: FieldKind,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub config: BiasExperimentConfig,
    pub trials: Vec<BiasTrial>,
    pub summary: Vec<BiasSummary>,
}

impl BiasReport {
    pub fn summary_for(&self, method: FieldKind) -> Option<&BiasSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    /// `trial,method,error` rows.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "trial,method,error")?;
        for t in &self.trials {
            writeln!(out, "{},{},{}", t.trial, t.method, t.error)?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            config: &'a BiasExperimentConfig,
            methods: &'a [BiasSummary],
        }
        serde_json::to_string_pretty(&Out {
            config: &self.config,
            methods: &self.summary,
        })
        .expect("plain data serialises")
    }
}

/// Circle scene: camera looking straight down at a circle centred under it.
struct CircleScene {
    k: Vec<CameraIntrinsics>,
    z: f64,
    radius: f64,
}

impl CircleScene {
    fn new(cfg: &BiasExperimentConfig) -> Result<Self> {
        let k0 = CameraIntrinsics::new(
            cfg.focal,
            cfg.focal,
            cfg.width as f64 / 2.0,
            cfg.height as f64 / 2.0,
            cfg.width,
            cfg.height,
        )?;
        Ok(Self {
            k: k0.pyramid(cfg.levels),
            z: cfg.camera_height,
            radius: cfg.radius,
        })
    }

    /// Circle point at angle `phi` in the camera frame. With `R = diag(1,-1,-1)`
    /// the world point `(r cos, r sin, 0)` maps to `(r cos, -r sin, h)`.
    fn point(&self, phi: f64) -> Point3 {
        Point3::new(self.radius * phi.cos(), -self.radius * phi.sin(), self.z)
    }

    /// Pixels covering the arc `[from, from + len]` at `level`, with radial normals.
    fn raster(&self, from: f64, len: f64, level: usize) -> Vec<(PixelCoord, Pixel, Vector2<f64>)> {
        let k = &self.k[level];
        let c = Pixel::new(k.cx, k.cy);
        let r_px = k.fx * self.radius / self.z;
        let n = ((len * r_px / 0.1).ceil() as usize).max(1);
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for i in 0..=n {
            let phi = from + len * i as f64 / n as f64;
            let px = k.project_unchecked(&self.point(phi));
            let (x, y) = (px.x.round(), px.y.round());
            if x < 0.0 || y < 0.0 || x >= k.width as f64 || y >= k.height as f64 {
                continue;
            }
            let cell = PixelCoord::new(x as u32, y as u32);
            if seen.insert(cell) {
                out.push((cell, px, (cell.to_pixel() - c).normalize()));
            }
        }
        out
    }

    /// Full circle, snapped to level-0 pixels and back-projected.
    fn model(&self) -> EdgeMap3D {
        let k = &self.k[0];
        let c = Pixel::new(k.cx, k.cy);
        let mut m = EdgeMap3D::default();
        for (cell, _, _) in self.raster(0.0, 2.0 * PI, 0) {
            let px = cell.to_pixel();
            let p = k.backproject(&px, self.z).expect("positive depth");
            m.push(p, px, (px - c).normalize());
        }
        m
    }

    fn data(&self, from: f64, len: f64, level: usize) -> EdgeMap2D {
        let k = &self.k[level];
        let mut e = EdgeMap2D::new(k.width, k.height);
        for (cell, _, g) in self.raster(from, len, level) {
            e.push(cell, g).expect("unit normals");
        }
        e
    }

    /// Fraction of the arc that projects inside the level-0 image.
    fn visible_fraction(&self, from: f64, len: f64) -> f64 {
        let k = &self.k[0];
        let inside = (0..=64)
            .filter(|&i| k.contains(&k.project_unchecked(&self.point(from + len * i as f64 / 64.0))))
            .count();
        inside as f64 / 65.0
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Registers the full circle against a random visible arc from perturbed
/// starts, unweighted, once per method. Trials run in parallel and are
/// reproducible for a fixed seed.
pub fn run_bias_experiment(cfg: &BiasExperimentConfig) -> Result<BiasReport> {
    if cfg.trials == 0 || !(cfg.arc > 0.0 && cfg.arc <= 2.0 * PI) || cfg.levels == 0 {
        return Err(Error::Config("need trials >= 1, arc in (0, 2π] and levels >= 1".into()));
    }
    let scene = CircleScene::new(cfg)?;
    let model = scene.model();
    let models = model.pyramid(cfg.levels);
    let solver = SolverConfig {
        levels: cfg.levels,
        truncation: cfg.truncation.clone(),
        sampling: Sampling::Exact,
        degeneracy: DegeneracyPolicy::Truncate,
        rank_threshold: cfg.rank_threshold,
        ..SolverConfig::default()
    };
    solver.validate()?;

    let per_trial: Vec<Vec<BiasTrial>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| -> Result<Vec<BiasTrial>> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(trial as u64);
            let from = if cfg.arc >= 2.0 * PI {
                0.0
            } else {
                let mut tries = 0;
                loop {
                    let f = rng.gen_range(0.0..2.0 * PI);
                    tries += 1;
                    if scene.visible_fraction(f, cfg.arc) >= MIN_VISIBLE_ARC || tries > 10_000 {
                        break f;
                    }
                }
            };
            let init = random_perturbation(&mut rng, cfg.max_translation, cfg.max_rotation_deg);
            let data: Vec<EdgeMap2D> = (0..cfg.levels).map(|l| scene.data(from, cfg.arc, l)).collect();
            let mut out = Vec::with_capacity(cfg.methods.len());
            for &method in &cfg.methods {
                let s = SolverConfig {
                    field: method,
                    ..solver.clone()
                };
                let fields = data
                    .iter()
                    .enumerate()
                    .map(|(l, e)| EdgeField::build(e, method, s.truncation_at(l), s.sampling))
                    .collect::<Result<Vec<_>>>()?;
                let (pose, converged) = match pyramid_register(&models, &fields, &scene.k, &init, &WeightFunction::None, &s) {
                    Ok(r) => (r.pose, true),
                    Err(_) => (init, false),
                };
                out.push(BiasTrial {
                    trial,
                    method,
                    error: pose.t.norm(),
                    converged,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let trials: Vec<BiasTrial> = per_trial.into_iter().flatten().collect();

    let summary = cfg
        .methods
        .iter()
        .map(|&m| {
            let mut e: Vec<f64> = trials.iter().filter(|t| t.method == m).map(|t| t.error).collect();
            e.sort_by(f64::total_cmp);
            BiasSummary {
                method: m,
                median: quantile(&e, 0.5),
                q1: quantile(&e, 0.25),
                q3: quantile(&e, 0.75),
                mean: e.iter().sum::<f64>() / e.len().max(1) as f64,
                failures: trials.iter().filter(|t| t.method == m && !t.converged).count(),
            }
        })
        .collect();
    Ok(BiasReport {
        config: cfg.clone(),
        trials,
        summary,
    })
}
