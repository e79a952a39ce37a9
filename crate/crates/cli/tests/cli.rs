use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_bevsplat");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    let cfg = r#"{
        "bev": {"resolution": 100},
        "scales": [50, 100],
        "rig": {"image_height": 64, "image_width": 128}
    }"#;
    std::fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn scene_lift_render_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();

    let gen = ok(&["gen-scene", "--config", &cfg, "--out", &p("scene")]);
    assert_eq!(gen["cameras"], 6);
    assert!(dir.path().join("scene/scene.json").exists());
    assert!(dir.path().join("scene/gt_mask.bevt").exists());

    let lift = ok(&[
        "lift",
        "--config",
        &cfg,
        "--scene",
        &p("scene"),
        "--out",
        &p("g"),
    ]);
    assert!(lift["count"].as_u64().unwrap() > 0);
    for f in ["mu3d.bevt", "cov3d.bevt", "opacity.bevt", "features.bevt"] {
        assert!(dir.path().join("g").join(f).exists(), "{f}");
    }

    ok(&[
        "render",
        "--config",
        &cfg,
        "--gaussians",
        &p("g"),
        "--out",
        &p("r"),
    ]);
    for f in ["fused.bevt", "fused.pgm", "scale_50.bevt", "scale_100.pgm"] {
        assert!(dir.path().join("r").join(f).exists(), "{f}");
    }
    let pgm = std::fs::read(dir.path().join("r/fused.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n100 100\n255\n"));

    let eval = ok(&[
        "eval",
        "--pred",
        &p("r/fused.bevt"),
        "--gt",
        &p("scene/gt_mask.bevt"),
        "--min-distance",
        "0",
    ]);
    let iou = eval["iou"].as_f64().unwrap();
    assert!(iou > 0.0 && iou <= 1.0, "{iou}");
}

#[test]
fn eval_of_gt_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let scene = dir.path().join("s");
    ok(&[
        "gen-scene",
        "--config",
        &cfg,
        "--out",
        scene.to_str().unwrap(),
    ]);
    let gt = scene.join("gt_mask.bevt");
    let gt = gt.to_str().unwrap();
    let eval = ok(&["eval", "--pred", gt, "--gt", gt, "--min-distance", "5"]);
    assert_eq!(eval["iou"], 1.0);
    assert_eq!(eval["min_distance"], 5.0);
}

#[test]
fn grad_check_passes_and_reports_groups() {
    for dtype in ["f32", "f64"] {
        let out = ok(&["grad-check", "--dtype", dtype, "--seed", "11"]);
        assert_eq!(out["passed"], true);
        let groups = out["report"]["groups"].as_array().unwrap();
        let names: Vec<_> = groups
            .iter()
            .map(|g| g["group"].as_str().unwrap())
            .collect();
        assert_eq!(names, ["features", "opacity_logits", "depth_logits"]);
    }
}

#[test]
fn sweep_k_prints_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = ok(&["sweep-k", "--config", &cfg, "--ks", "0.5,1,4"]);
    let pairs = out.as_array().unwrap();
    assert_eq!(pairs.len(), 3);
    assert_eq!(pairs[2][0], 4.0);
    assert!(pairs
        .iter()
        .all(|p| (0.0..=1.0).contains(&p[1].as_f64().unwrap())));
}

#[test]
fn bench_reports_positive_timings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = ok(&[
        "--threads",
        "2",
        "bench",
        "--config",
        &cfg,
        "--n",
        "3000",
        "--reps",
        "3",
        "--oracle-reps",
        "1",
    ]);
    assert_eq!(out["n_gaussians"], 3000);
    assert_eq!(out["threads"], 2);
    assert!(out["speedup"].as_f64().unwrap() > 0.0);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"k": -1}"#).unwrap();
    let out = run(&["gen-scene", "--config", bad.to_str().unwrap(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let missing = dir.path().join("nope.bevt");
    let m = missing.to_str().unwrap();
    let out = run(&["eval", "--pred", m, "--gt", m]);
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(BIN)
        .args(["grad-check", "--seed", "1"])
        .env("BEVSPLAT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
