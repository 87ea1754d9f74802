use std::path::Path;
use std::process::{Command, Output};

use orscene::conditioning::{apply_trajectory, ApplyMode, Trajectory};
use orscene::io;
use orscene::render::{render_sequence, RenderConfig, RenderMode};
use orscene::{synth, Resolution};
use serde_json::Value;

fn orscene(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orscene"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = orscene(args);
    assert!(
        out.status.success(),
        "orscene {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn echo_pipeline_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["synth", "--out", p(&d.join("src")), "--frames", "12", "--entities", "3", "--width", "256", "--height", "192", "--seed", "4"]);
    ok(&[
        "abstract",
        "--masks",
        p(&d.join("src/masks")),
        "--depth",
        p(&d.join("src/depth")),
        "--out",
        p(&d.join("scene.json")),
    ]);
    ok(&["condition", "--scene", p(&d.join("scene.json")), "--out", p(&d.join("bundle"))]);
    ok(&["generate", "--bundle", p(&d.join("bundle")), "--out", p(&d.join("gen"))]);
    let out = ok(&[
        "metrics",
        "--bundle",
        p(&d.join("bundle")),
        "--generated",
        p(&d.join("gen")),
        "--out",
        p(&d.join("report.json")),
        "--csv",
        p(&d.join("report.csv")),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("psnr inf"));
    let report = read_json(&d.join("report.json"));
    let s = &report["summary"];
    for key in ["bb_iou_macro", "seg_iou_macro", "bb_iou_micro", "seg_iou_micro", "ssim"] {
        assert_eq!(s[key], 1.0, "{key}");
    }
    assert_eq!(s["psnr"], "inf");
    let rows = std::fs::read_to_string(d.join("report.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 12 * 3);
}

#[test]
fn render_output_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let seq = synth::random_sequence(6, 5, 4, Resolution::new(120, 90));
    io::write_scene(&d.join("scene.json"), &seq).unwrap();
    ok(&["render", "--scene", p(&d.join("scene.json")), "--out", p(&d.join("depth"))]);
    ok(&["render", "--scene", p(&d.join("scene.json")), "--out", p(&d.join("flat")), "--mode", "ellipse_flat"]);

    let cfg = RenderConfig::default().with_resolution(seq.resolution);
    let expect = render_sequence(&seq, &cfg).unwrap();
    let depth = io::read_frames(&d.join("depth")).unwrap();
    let flat = io::read_frames(&d.join("flat")).unwrap();
    assert_eq!(depth.len(), 5);
    for ((a, b), f) in depth.iter().zip(&expect).zip(&flat) {
        assert_eq!(a.as_raw(), b.as_raw());
        for (x, y) in a.pixels().zip(f.pixels()) {
            assert_eq!(x.0[..2], y.0[..2]);
            assert_eq!(y.0[2], 0);
        }
    }
    let png = std::fs::read(d.join("depth").join(io::frame_name(0, "png"))).unwrap();
    assert_eq!(png, io::encode_png(&expect[0]).unwrap());
}

#[test]
fn edit_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let seq = synth::random_sequence(2, 9, 2, Resolution::new(64, 48));
    io::write_scene(&d.join("scene.json"), &seq).unwrap();
    let trajs = vec![
        Trajectory::new("e00", ApplyMode::Replace, vec![[0.1, 0.1], [0.9, 0.5]]),
        Trajectory::new("e01", ApplyMode::Offset, vec![[0.5, 0.5], [0.55, 0.6]]).with_span(2, 6),
    ];
    std::fs::write(d.join("edits.json"), serde_json::to_vec(&trajs).unwrap()).unwrap();
    ok(&["edit", "--scene", p(&d.join("scene.json")), "--trajectory", p(&d.join("edits.json")), "--out", p(&d.join("edited.json"))]);
    let expect = trajs.iter().fold(seq, |s, t| apply_trajectory(&s, t).unwrap());
    assert_eq!(io::read_scene(&d.join("edited.json")).unwrap(), expect);
}

#[test]
fn nearmiss_gen_emits_the_requested_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("ds");
    let out = ok(&[
        "nearmiss-gen", "--out", p(&d), "--positives", "9", "--negatives", "14", "--val-positives", "3",
        "--val-negatives", "4", "--width", "128", "--height", "96", "--seed", "5",
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed: 5"));
    let summary = read_json(&d.join("summary.json"));
    assert_eq!(summary["counts"]["train"]["positive"], 9);
    assert_eq!(summary["counts"]["train"]["negative"], 14);
    assert_eq!(summary["counts"]["val"]["positive"], 3);
    assert_eq!(summary["counts"]["val"]["negative"], 4);
    let mut reader = csv::Reader::from_path(d.join("labels.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 30);
    for r in &rows {
        assert!(d.join(&r[0]).is_file());
    }
}

#[test]
fn scenario_then_label_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&[
        "nearmiss-gen", "--out", p(&d.join("sc")), "--scenario", "approach_retreat", "--frames-per-scenario", "21",
        "--width", "128", "--height", "96",
    ]);
    ok(&["nearmiss-label", "--scene", p(&d.join("sc/scene.json")), "--out", p(&d.join("labels.csv"))]);
    let mut reader = csv::Reader::from_path(d.join("labels.csv")).unwrap();
    let labels: Vec<String> = reader.records().map(|r| r.unwrap()[1].to_string()).collect();
    assert_eq!(labels.len(), 21);
    let mut runs: Vec<&str> = Vec::new();
    for l in &labels {
        if runs.last() != Some(&l.as_str()) {
            runs.push(l);
        }
    }
    assert_eq!(runs, ["negative", "positive", "negative"]);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(orscene(&["--help"]).status.code(), Some(0));
    assert_eq!(orscene(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(orscene(&["render", "--scene"]).status.code(), Some(1));
    let missing = orscene(&["render", "--scene", p(&d.join("nope.json")), "--out", p(&d.join("o"))]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));

    std::fs::write(d.join("bad.json"), "{ not json").unwrap();
    assert_eq!(orscene(&["render", "--scene", p(&d.join("bad.json")), "--out", p(&d.join("o"))]).status.code(), Some(1));

    let seq = synth::random_sequence(1, 2, 1, Resolution::new(32, 24));
    io::write_scene(&d.join("scene.json"), &seq).unwrap();
    ok(&["condition", "--scene", p(&d.join("scene.json")), "--out", p(&d.join("bundle"))]);
    let failing = orscene(&[
        "generate", "--bundle", p(&d.join("bundle")), "--out", p(&d.join("gen")), "--backend", "command", "--command", "false",
    ]);
    assert_eq!(failing.status.code(), Some(2));
    assert!(!d.join("gen").exists());
    let usage = orscene(&["generate", "--bundle", p(&d.join("bundle")), "--out", p(&d.join("gen")), "--backend", "command"]);
    assert_eq!(usage.status.code(), Some(1));
}

#[test]
fn config_fills_options_the_command_line_omits() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let seq = synth::random_sequence(1, 2, 2, Resolution::new(100, 80));
    io::write_scene(&d.join("scene.json"), &seq).unwrap();
    std::fs::write(d.join("cfg.json"), r#"{"width": 64, "height": 48, "mode": "ellipse_flat"}"#).unwrap();
    ok(&[
        "render", "--config", p(&d.join("cfg.json")), "--scene", p(&d.join("scene.json")), "--out", p(&d.join("o")),
        "--width", "80",
    ]);
    let frames = io::read_frames(&d.join("o")).unwrap();
    assert_eq!(frames[0].dimensions(), (80, 48));
    assert!(frames.iter().all(|f| f.pixels().all(|px| px.0[2] == 0)));
    let expect = render_sequence(
        &seq,
        &RenderConfig::with_mode(RenderMode::EllipseFlat).with_resolution(Resolution::new(80, 48)),
    )
    .unwrap();
    assert_eq!(frames[1].as_raw(), expect[1].as_raw());

    std::fs::write(d.join("bad.json"), r#"{"colour": "red"}"#).unwrap();
    let out = orscene(&["render", "--config", p(&d.join("bad.json")), "--scene", p(&d.join("scene.json")), "--out", p(&d.join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}
