//! Gauss-Newton with iteratively re-weighted least squares, single level and
//! coarse-to-fine.

use std::io::Write;

use nalgebra::{Matrix6, Vector2, Vector6};

use super::residuals::{
    compute_jacobian, evaluate_residuals, warp_model_gradients, ResidualVector, MIN_VALID_RESIDUALS,
};
use super::weights::{mad_sigma, WeightFunction};
use crate::camera::{CameraIntrinsics, Pose};
use crate::edges::EdgeMap3D;
use crate::error::{Error, Result};
use crate::fields::{EdgeField, FieldKind, Sampling, DEFAULT_TRUNCATION};

/// What to do when the normal equations are (numerically) singular.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegeneracyPolicy {
    Fail,
    /// Solve in the observable subspace (pseudo-inverse).
    Truncate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Converged when `‖Δθ‖∞` falls below this.
    pub step_tolerance: f64,
    /// Converged when the weighted RMS changes by less than this.
    pub residual_tolerance: f64,
    pub levels: usize,
    pub field: FieldKind,
    /// Truncation radius per level, level 0 first.
    pub truncation: Vec<f64>,
    pub sampling: Sampling,
    pub max_halvings: usize,
    /// Re-warp model gradients every iteration instead of once per level.
    pub rewarp_gradients: bool,
    /// Use 10%, 30%, then all model points over the first three iterations.
    pub stochastic: bool,
    pub degeneracy: DegeneracyPolicy,
    /// Smallest accepted `λ_min / λ_max` of the normal matrix.
    pub rank_threshold: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tolerance: 1e-6,
            residual_tolerance: 1e-8,
            levels: 3,
            field: FieldKind::Onnf,
            truncation: DEFAULT_TRUNCATION.to_vec(),
            sampling: Sampling::Exact,
            max_halvings: 5,
            rewarp_gradients: false,
            stochastic: false,
            degeneracy: DegeneracyPolicy::Fail,
            rank_threshold: 1e-12,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if self.max_iterations == 0 || self.levels == 0 {
            return Err(Error::Config("iterations and levels must be positive".into()));
        }
        if !pos(self.step_tolerance) || !pos(self.residual_tolerance) || !pos(self.rank_threshold) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.truncation.len() < self.levels || !self.truncation.iter().all(|&t| pos(t)) {
            return Err(Error::Config("need one positive truncation radius per level".into()));
        }
        Ok(())
    }

    pub fn truncation_at(&self, level: usize) -> f64 {
        self.truncation[level.min(self.truncation.len() - 1)]
    }
}

/// One accepted (or final rejected) Gauss-Newton iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub level: usize,
    pub iteration: usize,
    /// Weighted RMS after the step.
    pub rms: f64,
    pub step_norm: f64,
    pub valid: usize,
    pub cost: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub pose: Pose,
    pub iterations: usize,
    pub converged: bool,
    /// Weighted RMS at the returned pose.
    pub rms: f64,
    pub records: Vec<IterationRecord>,
    /// Residuals at the returned pose over the full model.
    pub residuals: ResidualVector,
}

/// Result of a coarse-to-fine registration, levels in solve order.
#[derive(Debug, Clone)]
pub struct PyramidReport {
    pub pose: Pose,
    pub levels: Vec<(usize, SolveReport)>,
}

impl PyramidReport {
    pub fn records(&self) -> impl Iterator<Item = &IterationRecord> {
        self.levels.iter().flat_map(|(_, r)| r.records.iter())
    }

    /// The finest level solved.
    pub fn finest(&self) -> &SolveReport {
        &self.levels.last().expect("at least one level").1
    }
}

/// Writes iteration diagnostics as CSV.
pub fn write_diagnostics_csv<'a>(
    records: impl IntoIterator<Item = &'a IterationRecord>,
    out: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(out, "level,iteration,rms,step_norm,valid,cost,halvings")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.level, r.iteration, r.rms, r.step_norm, r.valid, r.cost, r.halvings
        )?;
    }
    Ok(())
}

/// Per-residual weights with the scale resolved from the valid residuals.
/// Invalid entries get weight 0.
pub fn robust_weights(residuals: &ResidualVector, w: &WeightFunction) -> Vec<f64> {
    let wf = resolve_scale(residuals, w);
    residuals
        .entries
        .iter()
        .map(|e| if e.valid { wf.weight(e.value) } else { 0.0 })
        .collect()
}

fn resolve_scale(residuals: &ResidualVector, w: &WeightFunction) -> WeightFunction {
    if w.needs_scale() {
        w.resolved(mad_sigma(&residuals.valid_values()).unwrap_or(1.0))
    } else {
        *w
    }
}

/// `Σ ω(r) r²`, with invalid entries charged as residuals of size `penalty`.
fn cost(residuals: &ResidualVector, wf: &WeightFunction, penalty: f64) -> f64 {
    let invalid = wf.weight(penalty) * penalty * penalty;
    residuals
        .entries
        .iter()
        .map(|e| if e.valid { wf.weight(e.value) * e.value * e.value } else { invalid })
        .sum()
}

fn weighted_rms(residuals: &ResidualVector, wf: &WeightFunction) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for e in residuals.entries.iter().filter(|e| e.valid) {
        let w = wf.weight(e.value);
        num += w * e.value * e.value;
        den += w;
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        0.0
    }
}

/// Rank is judged on the Jacobi-scaled system so that translation and
/// rotation units do not skew the eigenvalue ratio.
fn solve_normal_equations(h: &Matrix6<f64>, b: &Vector6<f64>, cfg: &SolverConfig) -> Result<Vector6<f64>> {
    let d = Vector6::from_fn(|i, _| if h[(i, i)] > 0.0 { h[(i, i)].sqrt().recip() } else { 0.0 });
    let hs = Matrix6::from_fn(|i, j| h[(i, j)] * d[i] * d[j]);
    let bs = b.component_mul(&d);
    let eig = hs.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if ratio >= cfg.rank_threshold {
        if let Some(ch) = hs.cholesky() {
            return Ok(-ch.solve(&bs).component_mul(&d));
        }
    }
    match cfg.degeneracy {
        DegeneracyPolicy::Fail => Err(Error::RankDeficient { ratio }),
        DegeneracyPolicy::Truncate => {
            if !(max > 0.0) {
                return Err(Error::RankDeficient { ratio });
            }
            let mut inv = Matrix6::zeros();
            for (i, &l) in eig.eigenvalues.iter().enumerate() {
                if l > cfg.rank_threshold * max {
                    let v = eig.eigenvectors.column(i);
                    inv += v * v.transpose() / l;
                }
            }
            Ok(-(inv * bs).component_mul(&d))
        }
    }
}

/// Active subset of the model for iteration `it`.
fn stage_fraction(cfg: &SolverConfig, it: usize) -> f64 {
    const SCHEDULE: [f64; 3] = [0.1, 0.3, 1.0];
    if cfg.stochastic {
        SCHEDULE[it.min(SCHEDULE.len() - 1)]
    } else {
        1.0
    }
}

fn subset(model: &EdgeMap3D, grads: &[Vector2<f64>], fraction: f64) -> (EdgeMap3D, Vec<Vector2<f64>>) {
    let n = model.len();
    let m = ((n as f64 * fraction).ceil() as usize).clamp(MIN_VALID_RESIDUALS.min(n), n);
    let idx: Vec<usize> = (0..m).map(|j| j * n / m).collect();
    (model.select(&idx), idx.iter().map(|&i| grads[i]).collect())
}

/// Robust Gauss-Newton registration of `model` against one field.
pub fn irls_solve(
    model: &EdgeMap3D,
    field: &EdgeField,
    k: &CameraIntrinsics,
    init: &Pose,
    w: &WeightFunction,
    cfg: &SolverConfig,
) -> Result<SolveReport> {
    solve_level(model, field, k, init, w, cfg, 0)
}

fn check_valid(res: &ResidualVector) -> Result<()> {
    let valid = res.valid_count();
    if valid < MIN_VALID_RESIDUALS {
        return Err(Error::InsufficientOverlap {
            valid,
            required: MIN_VALID_RESIDUALS,
        });
    }
    Ok(())
}

fn solve_level(
    model: &EdgeMap3D,
    field: &EdgeField,
    k: &CameraIntrinsics,
    init: &Pose,
    w: &WeightFunction,
    cfg: &SolverConfig,
    level: usize,
) -> Result<SolveReport> {
    cfg.validate()?;
    if model.is_empty() {
        return Err(Error::EmptyModel);
    }
    if !w.is_valid() {
        return Err(Error::Config(format!("invalid weight function {w:?}")));
    }
    let penalty = field.truncation();
    let mut theta = init.to_vector();
    let mut grads = warp_model_gradients(model, init, k);

    let mut fraction = stage_fraction(cfg, 0);
    let (mut active, mut active_grads) = subset(model, &grads, fraction);
    let mut res = evaluate_residuals(&active, init, field, k, &active_grads);
    check_valid(&res)?;

    let mut records = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut wf = resolve_scale(&res, w);
    let mut rms = weighted_rms(&res, &wf);

    for it in 0..cfg.max_iterations {
        let pose = Pose::from_vector(&theta);
        let f = stage_fraction(cfg, it);
        let rewarp = cfg.rewarp_gradients && it > 0;
        if rewarp {
            grads = warp_model_gradients(model, &pose, k);
        }
        if f != fraction || rewarp {
            fraction = f;
            (active, active_grads) = subset(model, &grads, fraction);
            res = evaluate_residuals(&active, &pose, field, k, &active_grads);
            check_valid(&res)?;
        }
        wf = resolve_scale(&res, w);
        let cost_old = cost(&res, &wf, penalty);
        let rms_old = weighted_rms(&res, &wf);

        let jac = compute_jacobian(&active, &pose, &res, field, k);
        let mut h = Matrix6::zeros();
        let mut b = Vector6::zeros();
        for (row, &i) in jac.rows.iter().zip(&jac.index) {
            let r = res.entries[i].value;
            let wi = wf.weight(r);
            h += row.transpose() * row * wi;
            b += row.transpose() * (wi * r);
        }
        let delta = solve_normal_equations(&h, &b, cfg)?;

        let mut scale = 1.0;
        let mut accepted = None;
        let mut halvings = 0;
        loop {
            let cand = theta + delta * scale;
            let cand_pose = Pose::from_vector(&cand);
            let cand_res = evaluate_residuals(&active, &cand_pose, field, k, &active_grads);
            let c = if cand_res.valid_count() >= MIN_VALID_RESIDUALS {
                cost(&cand_res, &wf, penalty)
            } else {
                f64::INFINITY
            };
            if c <= cost_old * (1.0 + 1e-12) {
                accepted = Some((cand, cand_res, c));
                break;
            }
            if halvings == cfg.max_halvings {
                break;
            }
            halvings += 1;
            scale *= 0.5;
        }
        iterations = it + 1;

        let Some((cand, cand_res, c)) = accepted else {
            records.push(IterationRecord {
                level,
                iteration: it,
                rms: rms_old,
                step_norm: 0.0,
                valid: res.valid_count(),
                cost: cost_old,
                halvings,
            });
            // no descent direction left: treat as converged at the current pose
            converged = fraction >= 1.0;
            rms = rms_old;
            if converged {
                break;
            }
            continue;
        };

        let step_norm = (delta * scale).amax();
        theta = cand;
        res = cand_res;
        rms = weighted_rms(&res, &wf);
        records.push(IterationRecord {
            level,
            iteration: it,
            rms,
            step_norm,
            valid: res.valid_count(),
            cost: c,
            halvings,
        });
        if fraction >= 1.0 && (step_norm < cfg.step_tolerance || (rms - rms_old).abs() < cfg.residual_tolerance) {
            converged = true;
            break;
        }
    }

    let pose = Pose::from_vector(&theta);
    if fraction < 1.0 {
        res = evaluate_residuals(model, &pose, field, k, &grads);
        rms = weighted_rms(&res, &resolve_scale(&res, w));
    }
    Ok(SolveReport {
        pose,
        iterations,
        converged,
        rms,
        records,
        residuals: res,
    })
}

/// Coarse-to-fine registration: solves the coarsest level first and chains
/// the poses down to level 0. Slices are indexed by level.
pub fn pyramid_register(
    models: &[EdgeMap3D],
    fields: &[EdgeField],
    ks: &[CameraIntrinsics],
    init: &Pose,
    w: &WeightFunction,
    cfg: &SolverConfig,
) -> Result<PyramidReport> {
    cfg.validate()?;
    let levels = cfg.levels.min(models.len()).min(fields.len()).min(ks.len());
    if levels == 0 {
        return Err(Error::EmptyModel);
    }
    let mut pose = *init;
    let mut reports = Vec::with_capacity(levels);
    for level in (0..levels).rev() {
        let rep = solve_level(&models[level], &fields[level], &ks[level], &pose, w, cfg, level)?;
        pose = rep.pose;
        reports.push((level, rep));
    }
    Ok(PyramidReport { pose, levels: reports })
}
