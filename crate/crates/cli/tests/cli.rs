use std::path::Path;
use std::process::{Command, Output};

use edgevo::camera::{CameraConfig, CayleyRotation, Point3, Pose};
use edgevo::synthetic::RenderScene;

fn edgevo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgevo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small desk sequence moving 5 mm per frame with a slight yaw.
fn write_desk(dir: &Path, n: usize) {
    let k = CameraConfig::default().intrinsics;
    let frames: Vec<(f64, Pose)> = (0..n)
        .map(|i| {
            let s = i as f64;
            (
                1.0 + 0.033 * s,
                Pose::new(Point3::new(0.005 * s, -0.002 * s, 0.003 * s), CayleyRotation::new(0.0, 0.0005 * s, 0.0)),
            )
        })
        .collect();
    RenderScene::desk().write_sequence(dir, &k, &frames, 5000.0).unwrap();
}

#[test]
fn help_lists_defaults() {
    let o = edgevo(&["track", "--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for flag in ["--field", "--weight", "--disparity", "--alpha", "--truncation", "--min-valid", "--max-points"] {
        assert!(text.contains(flag), "missing {flag}");
    }
    assert!(text.contains("[default: onnf]"));
    assert!(text.contains("[default: 0.9]"));
    assert!(text.contains("[default: 8 16 32]"));
    let o = edgevo(&["bias", "--help"]);
    assert!(stdout(&o).contains("[default: 1000]"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(edgevo(&[]).status.code(), Some(1));
    assert_eq!(edgevo(&["bias", "--trials", "many"]).status.code(), Some(1));
    assert_eq!(edgevo(&["eval", "--est", "a.txt"]).status.code(), Some(1));
    assert_eq!(edgevo(&["track", "--dataset", "x", "--field", "sdf"]).status.code(), Some(1));
}

#[test]
fn bias_rows_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, j) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("s.json"));
    for out in [&a, &b] {
        let o = edgevo(&["bias", "--trials", "6", "--seed", "7", "--csv", p(out), "--json", p(&j)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().next(), Some("trial,method,error"));
    assert_eq!(text.lines().count(), 1 + 3 * 6);
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&j).unwrap()).unwrap();
    assert_eq!(summary["methods"].as_array().unwrap().len(), 3);
    assert!(summary["methods"][0]["median"].is_number());
}

#[test]
fn bias_rejects_empty_run() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("x.csv");
    assert_eq!(edgevo(&["bias", "--trials", "0", "--csv", p(&csv)]).status.code(), Some(1));
}

#[test]
fn track_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    write_desk(&seq, 6);
    let traj = dir.path().join("traj.txt");
    let log = dir.path().join("log.csv");
    let diag = dir.path().join("diag.csv");
    let cloud = dir.path().join("cloud.ply");
    let res = dir.path().join("res.txt");
    let o = edgevo(&[
        "track", "--dataset", p(&seq), "--out", p(&traj), "--log", p(&log), "--diagnostics", p(&diag),
        "--cloud", p(&cloud), "--residuals", p(&res),
    ]);
    assert!(o.status.success(), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("RPE:"));
    assert_eq!(std::fs::read_to_string(&traj).unwrap().lines().count(), 6);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 7);
    assert!(std::fs::read_to_string(&diag).unwrap().lines().count() > 5);
    assert!(std::fs::read_to_string(&cloud).unwrap().starts_with("ply"));
    assert!(std::fs::read_to_string(&res).unwrap().lines().count() > 100);

    let o = edgevo(&["eval", "--est", p(&traj), "--gt", p(&seq.join("groundtruth.txt")), "--delta", "0.1", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(v["ate_m"].as_f64().unwrap() < 0.005, "{v}");
    assert!(v["rpe_translation_m_per_s"].as_f64().unwrap() < 0.2, "{v}");
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    write_desk(&seq, 4);
    let traj = dir.path().join("traj.txt");
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[track]\nmax_frames = 2\nfield = \"annf\"\n").unwrap();
    let o = edgevo(&["--config", p(&cfg), "track", "--dataset", p(&seq), "--out", p(&traj), "--max-frames", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&traj).unwrap().lines().count(), 2);

    std::fs::write(&cfg, "[track]\nmax_frame = 2\n").unwrap();
    let o = edgevo(&["--config", p(&cfg), "track", "--dataset", p(&seq)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_identical_and_missing() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.txt");
    let mut text = String::new();
    for i in 0..20 {
        let f = i as f64 * 0.1;
        text += &format!("{:.4} {} {} {} 0 0 {} {}\n", f, f.sin(), f.cos(), 0.1 * f, (0.05 * f).sin(), (0.05 * f).cos());
    }
    std::fs::write(&t, text).unwrap();
    let o = edgevo(&["eval", "--est", p(&t), "--gt", p(&t)]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("ATE:             0.000000 m"), "{out}");
    let o = edgevo(&["eval", "--est", p(&dir.path().join("none.txt")), "--gt", p(&t)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn track_missing_dataset_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = edgevo(&["track", "--dataset", p(&dir.path().join("nothing"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fields_dump_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let k = CameraConfig::default().intrinsics;
    let (g, _) = RenderScene::desk().render(&Pose::identity(), &k);
    let img = dir.path().join("g.png");
    edgevo::dataset::save_gray(&g, &img).unwrap();
    let out = dir.path().join("out");
    let o = edgevo(&["fields", "--image", p(&img), "--out-dir", p(&out), "--bench", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("median"));
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 8);
    let csv = dir.path().join("nn.csv");
    let o = edgevo(&["fields", "--image", p(&img), "--field", "annf", "--csv", p(&csv), "--level", "1"]);
    assert!(o.status.success());
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("x,y,nn_x,nn_y"));
    let o = edgevo(&["fields", "--image", p(&img), "--csv", p(&csv)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fit_logistic_dump() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.txt");
    let n = 4000;
    // logistic quantiles with scale 0.8
    let text: String = (0..n)
        .map(|i| {
            let u = (i as f64 + 0.5) / n as f64;
            format!("{}\n", 0.8 * (u / (1.0 - u)).ln())
        })
        .collect();
    std::fs::write(&path, format!("# residuals\n{text}")).unwrap();
    let json = dir.path().join("fit.json");
    let o = edgevo(&["fit", "--residuals", p(&path), "--json", p(&json)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fits: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(fits.as_array().unwrap().len(), 4);
    let o = edgevo(&["fit", "--residuals", p(&path), "--model", "logistic"]);
    assert!(o.status.success());

    std::fs::write(&path, "0.1\n0.2\n").unwrap();
    assert_eq!(edgevo(&["fit", "--residuals", p(&path)]).status.code(), Some(2));
    assert_eq!(edgevo(&["fit", "--residuals", p(&path), "--model", "gauss"]).status.code(), Some(1));
}
