use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use edgevo::camera::CameraConfig;
use edgevo::dataset::{
    export_pointcloud_ply, load_gray, load_tum_sequence, read_trajectory_tum, write_trajectory_tum, DEFAULT_MAX_DT,
};
use edgevo::edges::{detect_edges, NUM_BINS};
use edgevo::evaluation::{compute_ate, compute_rpe, run_bias_experiment, BiasExperimentConfig, Trajectory};
use edgevo::fields::{write_distance_png, EdgeField, FieldKind, Sampling};
use edgevo::grid::image_pyramid;
use edgevo::pipeline::{
    Tracker, TrackerConfig, TrackingStatus, DEFAULT_ALPHA, DEFAULT_DISPARITY_THRESHOLD, DEFAULT_MAX_POINTS,
    DEFAULT_MIN_VALID_FRACTION,
};
use edgevo::registration::{
    fit_all, fit_sensor_model, Freiburg, IterationRecord, Scale, SensorModel, SolverConfig, WeightFunction,
    DEFAULT_TUKEY_EPSILON,
};

use crate::Failure;

/// Maps library errors onto exit classes.
fn classify(e: edgevo::Error) -> Failure {
    use edgevo::Error as E;
    match e {
        E::Config(_) | E::InvalidThresholds { .. } | E::InvalidIntrinsics(_) => Failure::Usage(e.into()),
        E::Dataset(_) | E::Io(_) | E::Image(_) | E::SizeMismatch(..) | E::ImageTooSmall { .. } | E::Evaluation(_) | E::Fit(_) => {
            Failure::Data(e.into())
        }
        _ => Failure::Tracking(e.into()),
    }
}

fn io_fail(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(anyhow!(e).context(format!("writing {}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(io_fail(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    T,
    Huber,
    Cauchy,
    Tukey,
    None,
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackArgs {
    /// TUM-format sequence directory (rgb.txt, depth.txt, optional groundtruth.txt).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output trajectory in TUM format.
    #[arg(long, default_value = "trajectory.txt")]
    pub out: PathBuf,
    #[arg(long, default_value_t = FieldKind::Onnf)]
    pub field: FieldKind,
    #[arg(long, value_enum, default_value_t = WeightKind::T)]
    pub weight: WeightKind,
    /// Fixed parameters fitted on fr1, fr2 or fr3 instead of online scale.
    #[arg(long)]
    pub preset: Option<String>,
    /// Degrees of freedom of the t-distribution weight.
    #[arg(long, default_value_t = edgevo::registration::DEFAULT_T_NU)]
    pub nu: f64,
    /// Fixed t-distribution scale (default: 1.4826 * MAD per iteration).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Scale k for Huber, Cauchy and Tukey-Lambda weights.
    #[arg(long, default_value_t = 1.0)]
    pub k: f64,
    /// Small-residual switch of the Tukey-Lambda weight.
    #[arg(long, default_value_t = DEFAULT_TUKEY_EPSILON)]
    pub epsilon: f64,
    /// Truncation radius per pyramid level, finest first.
    #[arg(long, value_delimiter = ',', default_values_t = edgevo::fields::DEFAULT_TRUNCATION)]
    pub truncation: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    #[arg(long, default_value_t = 50)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub step_tolerance: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub residual_tolerance: f64,
    /// Use adaptively sampled oriented fields.
    #[arg(long)]
    pub adaptive: bool,
    /// Coarse-to-fine random subsets of the model within each level.
    #[arg(long)]
    pub stochastic: bool,
    /// Re-warp model gradients every iteration instead of once per level.
    #[arg(long)]
    pub rewarp: bool,
    /// Velocity decay of the motion model.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Median disparity (px) that triggers a new reference frame.
    #[arg(long, default_value_t = DEFAULT_DISPARITY_THRESHOLD)]
    pub disparity: f64,
    /// Valid-residual fraction below which a new reference is created.
    #[arg(long, default_value_t = DEFAULT_MIN_VALID_FRACTION)]
    pub min_valid: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_POINTS)]
    pub max_points: usize,
    /// Build reference frames on a background thread.
    #[arg(long = "async")]
    pub asynchronous: bool,
    /// Intrinsics file with `key = value` lines (fx, fy, cx, cy, width, height, depth_scale).
    #[arg(long)]
    pub camera: Option<PathBuf>,
    /// Maximum rgb/depth timestamp difference in seconds.
    #[arg(long, default_value_t = DEFAULT_MAX_DT)]
    pub max_dt: f64,
    /// Stop after this many frames.
    #[arg(long)]
    pub max_frames: Option<usize>,
    /// ASCII PLY of all reference-frame edge points.
    #[arg(long)]
    pub cloud: Option<PathBuf>,
    /// Per-iteration solver diagnostics CSV.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    /// Per-frame status CSV (lost frames, keyframes, quality).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Finest-level residuals, one per line, for `fit`.
    #[arg(long)]
    pub residuals: Option<PathBuf>,
}

impl TrackArgs {
    fn weight(&self) -> edgevo::Result<WeightFunction> {
        let preset = self.preset.as_deref().map(str::parse::<Freiburg>).transpose()?;
        let w = match (self.weight, preset) {
            (WeightKind::None, _) => WeightFunction::None,
            (WeightKind::T, Some(p)) => WeightFunction::t_preset(p),
            (WeightKind::Huber, Some(p)) => WeightFunction::huber_preset(p),
            (WeightKind::Cauchy, Some(p)) => WeightFunction::cauchy_preset(p),
            (WeightKind::Tukey, Some(p)) => WeightFunction::tukey_preset(p),
            (WeightKind::T, None) => WeightFunction::TDistribution {
                nu: self.nu,
                scale: self.sigma.map_or(Scale::Mad, Scale::Fixed),
            },
            (WeightKind::Huber, None) => WeightFunction::Huber { k: self.k },
            (WeightKind::Cauchy, None) => WeightFunction::Cauchy { k: self.k },
            (WeightKind::Tukey, None) => WeightFunction::TukeyLambda {
                k: self.k,
                epsilon: self.epsilon,
            },
        };
        Ok(w)
    }

    fn tracker_config(&self) -> edgevo::Result<TrackerConfig> {
        let cfg = TrackerConfig {
            solver: SolverConfig {
                max_iterations: self.max_iterations,
                step_tolerance: self.step_tolerance,
                residual_tolerance: self.residual_tolerance,
                levels: self.levels,
                field: self.field,
                truncation: self.truncation.clone(),
                sampling: if self.adaptive { Sampling::adaptive_default() } else { Sampling::Exact },
                rewarp_gradients: self.rewarp,
                stochastic: self.stochastic,
                ..SolverConfig::default()
            },
            weight: self.weight()?,
            alpha: self.alpha,
            disparity_threshold: self.disparity,
            min_valid_fraction: self.min_valid,
            max_points: self.max_points,
            switch_references: true,
            asynchronous: self.asynchronous,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn track(a: TrackArgs) -> Result<(), Failure> {
    let cfg = a.tracker_config().map_err(classify)?;
    let camera = match &a.camera {
        Some(p) => CameraConfig::load(p).map_err(classify)?,
        None => CameraConfig::default(),
    };
    let seq = load_tum_sequence(&a.dataset, a.max_dt, camera.depth_scale).map_err(classify)?;
    let frames = &seq.frames[..a.max_frames.unwrap_or(usize::MAX).min(seq.frames.len())];
    if frames.is_empty() {
        return Err(Failure::Data(anyhow!("no associated frames in {}", a.dataset.display())));
    }

    let mut tracker = Tracker::new(camera.intrinsics, cfg).map_err(classify)?;
    let mut records: Vec<(usize, IterationRecord)> = Vec::new();
    let mut residuals: Vec<f64> = Vec::new();
    let started = Instant::now();
    for (i, f) in frames.iter().enumerate() {
        let gray = seq.load_gray(f).map_err(classify)?;
        let depth = seq.load_depth(f).map_err(classify)?;
        tracker.track_frame(&gray, &depth, f.timestamp).map_err(classify)?;
        if let Some(report) = tracker.last_report() {
            records.extend(report.records().map(|r| (i, *r)));
            if a.residuals.is_some() {
                residuals.extend(report.finest().residuals.valid_values());
            }
        }
    }
    tracker.flush();
    let elapsed = started.elapsed().as_secs_f64();

    let entries = tracker.trajectory();
    let trajectory = Trajectory::new(entries.iter().map(|e| (e.timestamp, e.pose)).collect()).map_err(classify)?;
    write_trajectory_tum(&trajectory, &a.out).map_err(classify)?;

    if let Some(path) = &a.log {
        let mut out = create(path)?;
        let mut write = || -> std::io::Result<()> {
            writeln!(out, "timestamp,status,keyframe,median_disparity,valid_fraction")?;
            for e in entries {
                let (d, v) = e.quality.map_or((f64::NAN, f64::NAN), |q| (q.median_disparity, q.valid_fraction));
                let status = match &e.status {
                    TrackingStatus::Ok => "ok",
                    TrackingStatus::Lost(_) => "lost",
                };
                writeln!(out, "{:.6},{status},{},{d},{v}", e.timestamp, e.keyframe as u8)?;
            }
            out.flush()
        };
        write().map_err(io_fail(path))?;
    }
    if let Some(path) = &a.diagnostics {
        let mut out = create(path)?;
        let mut write = || -> std::io::Result<()> {
            writeln!(out, "frame,level,iteration,rms,step_norm,valid,cost,halvings")?;
            for (f, r) in &records {
                writeln!(
                    out,
                    "{f},{},{},{},{},{},{},{}",
                    r.level, r.iteration, r.rms, r.step_norm, r.valid, r.cost, r.halvings
                )?;
            }
            out.flush()
        };
        write().map_err(io_fail(path))?;
    }
    if let Some(path) = &a.residuals {
        let mut out = create(path)?;
        let mut write = || -> std::io::Result<()> {
            for r in &residuals {
                writeln!(out, "{r}")?;
            }
            out.flush()
        };
        write().map_err(io_fail(path))?;
    }
    if let Some(path) = &a.cloud {
        let kf = tracker.keyframes();
        export_pointcloud_ply(kf.iter().map(|r| (&r.pose, r.model().points.as_slice())), path).map_err(classify)?;
    }

    let lost = entries.iter().filter(|e| matches!(e.status, TrackingStatus::Lost(_))).count();
    let keyframes = entries.iter().filter(|e| e.keyframe).count();
    println!(
        "frames: {}  keyframes: {keyframes}  lost: {lost}  rate: {:.1} Hz",
        entries.len(),
        entries.len() as f64 / elapsed.max(1e-9)
    );
    if let Some(gt) = &seq.ground_truth {
        match (compute_rpe(&trajectory, gt, 1.0), compute_ate(&trajectory, gt)) {
            (Ok(rpe), Ok(ate)) => println!(
                "RPE: {:.4} deg/s  {:.4} m/s  ATE: {ate:.4} m",
                rpe.rotation_deg_per_s, rpe.translation_m_per_s
            ),
            (Err(e), _) | (_, Err(e)) => log::warn!("ground-truth evaluation skipped: {e}"),
        }
    }
    if lost > 0 {
        return Err(Failure::Tracking(anyhow!("tracking lost on {lost} of {} frames", entries.len())));
    }
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    /// Estimated trajectory (TUM format).
    #[arg(long)]
    pub est: PathBuf,
    /// Ground-truth trajectory (TUM format).
    #[arg(long)]
    pub gt: PathBuf,
    /// RPE interval in seconds.
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    if !(a.delta > 0.0) {
        return Err(Failure::Usage(anyhow!("--delta must be positive")));
    }
    let est = read_trajectory_tum(&a.est).map_err(classify)?;
    let gt = read_trajectory_tum(&a.gt).map_err(classify)?;
    let rpe = compute_rpe(&est, &gt, a.delta).map_err(classify)?;
    let ate = compute_ate(&est, &gt).map_err(classify)?;
    if a.json {
        let v = serde_json::json!({
            "rpe_rotation_deg_per_s": rpe.rotation_deg_per_s,
            "rpe_translation_m_per_s": rpe.translation_m_per_s,
            "rpe_intervals": rpe.intervals,
            "ate_m": ate,
        });
        println!("{v}");
    } else {
        println!("RPE rotation:    {:.6} deg/s", rpe.rotation_deg_per_s);
        println!("RPE translation: {:.6} m/s", rpe.translation_m_per_s);
        println!("ATE:             {ate:.6} m");
    }
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Visible arc length in radians.
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_4)]
    pub arc: f64,
    /// Radius of the translation perturbation ball (world units).
    #[arg(long, default_value_t = 5.0)]
    pub max_translation: f64,
    /// Maximum rotation perturbation in degrees.
    #[arg(long, default_value_t = 2.0)]
    pub max_rotation: f64,
    #[arg(long, value_delimiter = ',', default_values_t = FieldKind::ALL)]
    pub methods: Vec<FieldKind>,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    /// Truncation radius per pyramid level, finest first.
    #[arg(long, value_delimiter = ',', default_values_t = edgevo::fields::DEFAULT_TRUNCATION)]
    pub truncation: Vec<f64>,
    /// Directions whose scaled curvature falls below this share of the largest are frozen.
    #[arg(long, default_value_t = 1e-4)]
    pub rank_threshold: f64,
    /// Per-trial errors (`trial,method,error`).
    #[arg(long, default_value = "bias.csv")]
    pub csv: PathBuf,
    /// Summary with medians and quartiles.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

pub fn bias(a: BiasArgs) -> Result<(), Failure> {
    let cfg = BiasExperimentConfig {
        trials: a.trials,
        seed: a.seed,
        arc: a.arc,
        max_translation: a.max_translation,
        max_rotation_deg: a.max_rotation,
        methods: a.methods.clone(),
        levels: a.levels,
        truncation: a.truncation.clone(),
        rank_threshold: a.rank_threshold,
        ..BiasExperimentConfig::default()
    };
    let report = run_bias_experiment(&cfg).map_err(|e| match e {
        edgevo::Error::Config(_) => Failure::Usage(e.into()),
        e => classify(e),
    })?;
    let mut out = create(&a.csv)?;
    report.write_csv(&mut out).and_then(|_| out.flush()).map_err(io_fail(&a.csv))?;
    if let Some(path) = &a.json {
        std::fs::write(path, report.summary_json()).map_err(io_fail(path))?;
    }
    println!("method  median      q1          q3          failures");
    for s in &report.summary {
        println!("{:<7} {:<11.5} {:<11.5} {:<11.5} {}", s.method, s.median, s.q1, s.q3, s.failures);
    }
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldsArgs {
    /// Input image (PNG, converted to grayscale).
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = FieldKind::Onnf)]
    pub field: FieldKind,
    #[arg(long, default_value_t = 8.0)]
    pub truncation: f64,
    /// Pyramid level of the image to use.
    #[arg(long, default_value_t = 0)]
    pub level: usize,
    #[arg(long)]
    pub adaptive: bool,
    /// Directory for distance PNGs (one per orientation bin for ONNF).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Nearest-neighbour CSV (ANNF only).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Rebuild the field this many times and report the median time.
    #[arg(long, default_value_t = 0)]
    pub bench: usize,
}

pub fn fields(a: FieldsArgs) -> Result<(), Failure> {
    let gray = load_gray(&a.image).map_err(classify)?;
    let pyramid = image_pyramid(&gray, a.level + 1);
    let img = pyramid
        .get(a.level)
        .ok_or_else(|| Failure::Usage(anyhow!("image too small for level {}", a.level)))?;
    let sampling = if a.adaptive { Sampling::adaptive_default() } else { Sampling::Exact };
    let t0 = Instant::now();
    let edges = detect_edges(img, None).map_err(classify)?;
    let edge_ms = t0.elapsed().as_secs_f64() * 1e3;
    let field = EdgeField::build(&edges, a.field, a.truncation, sampling).map_err(classify)?;
    println!("{}x{} image, {} edge pixels ({edge_ms:.2} ms)", img.width(), img.height(), edges.len());

    if a.bench > 0 {
        let mut times: Vec<f64> = (0..a.bench)
            .map(|_| {
                let t = Instant::now();
                let _ = EdgeField::build(&edges, a.field, a.truncation, sampling);
                t.elapsed().as_secs_f64() * 1e3
            })
            .collect();
        times.sort_by(f64::total_cmp);
        println!("{} construction: median {:.3} ms over {} runs", a.field, times[times.len() / 2], a.bench);
    }
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).map_err(io_fail(dir))?;
        let bins = if a.field == FieldKind::Onnf { NUM_BINS } else { 1 };
        for b in 0..bins {
            let name = if bins > 1 { format!("{}_bin{b}.png", a.field) } else { format!("{}.png", a.field) };
            write_distance_png(&field, b, dir.join(name)).map_err(classify)?;
        }
    }
    if let Some(path) = &a.csv {
        let EdgeField::Nearest(nn) = &field else {
            return Err(Failure::Usage(anyhow!("--csv requires --field annf")));
        };
        let mut out = create(path)?;
        nn.write_csv(&mut out).and_then(|_| out.flush()).map_err(io_fail(path))?;
    }
    Ok(())
}

#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitArgs {
    /// Residual dump: one value per line, `#` comments allowed.
    #[arg(long)]
    pub residuals: PathBuf,
    /// `all`, `t`, `huber`, `cauchy` or `logistic`.
    #[arg(long, default_value = "all")]
    pub model: String,
    /// Write the fits as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn read_residuals(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| l.parse::<f64>().with_context(|| format!("line {}: bad number {l:?}", i + 1)))
        .collect()
}

pub fn fit(a: FitArgs) -> Result<(), Failure> {
    let samples = read_residuals(&a.residuals).map_err(Failure::Data)?;
    let fits = if a.model.eq_ignore_ascii_case("all") {
        fit_all(&samples).map_err(classify)?
    } else {
        let model: SensorModel = a.model.parse().map_err(|e: edgevo::Error| Failure::Usage(e.into()))?;
        vec![fit_sensor_model(&samples, model).map_err(classify)?]
    };
    for f in &fits {
        println!(
            "{:<10} nll {:>10.5}  params {}",
            format!("{:?}", f.model),
            f.nll,
            serde_json::to_string(&f.params).expect("plain data")
        );
    }
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&fits).expect("plain data");
        std::fs::write(path, text).map_err(io_fail(path))?;
    }
    Ok(())
}
