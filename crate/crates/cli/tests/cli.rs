use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
num_classes = 2
segments_per_video = 16
feature_dim = 8
actions_per_video = [1, 2]
action_length = [2, 4]
num_train = 12
num_test = 6

[train]
steps_per_iteration = 4
batch_size = 4
iterations = 2
lr = 0.01

[report]
videos = 3
"#;

fn biscc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biscc"))
        .args(args)
        .env_remove("BISCC_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = biscc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = biscc(args);
    assert_eq!(out.status.code(), Some(1), "{args:?} should fail");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic is one line: {err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let data_dir = root.join("data");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data_dir)]);
    Fixture {
        _tmp: tmp,
        data: data_dir.join("dataset.bscc"),
        root,
        config,
    }
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn generate_train_localize_eval() {
    let f = fixture();
    let run = f.root.join("run");
    ok(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&run)]);
    for name in [
        "config.toml",
        "dataset.bscc",
        "metrics.csv",
        "iterations.csv",
        "baseline.student.ckpt",
        "original.student.ckpt",
        "augmented.teacher.ckpt",
    ] {
        assert!(run.join(name).exists(), "missing {name}");
    }
    assert_eq!(csv_rows(&run.join("metrics.csv")).len(), 8);
    assert_eq!(csv_rows(&run.join("iterations.csv")).len(), 2);

    let loc = f.root.join("loc");
    let ckpt = run.join("original.student.ckpt");
    ok(&["localize", "--config", s(&f.config), "--data", s(&f.data), "--checkpoint", s(&ckpt), "--out", s(&loc)]);
    let dets = loc.join("detections.csv");
    assert!(fs::read_to_string(&dets).unwrap().starts_with("video_id,class,start,end,conf"));

    let ev = f.root.join("eval");
    ok(&["eval", "--config", s(&f.config), "--data", s(&f.data), "--detections", s(&dets), "--out", s(&ev)]);
    let rows = csv_rows(&ev.join("map.csv"));
    assert_eq!(rows.len(), 8);
    assert_eq!(rows.last().unwrap()[0], "avg");
    for dir in [&loc, &ev] {
        assert!(dir.join("config.toml").exists());
    }
}

#[test]
fn baseline_command_writes_checkpoints_and_metrics() {
    let f = fixture();
    let run = f.root.join("base");
    ok(&["train-baseline", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&run)]);
    let rows = csv_rows(&run.join("metrics.csv"));
    assert_eq!(rows.len(), 4);
    assert!(!rows[3][7].is_empty(), "q filled on the last row");
    assert!(rows[0][7].is_empty());
    assert!(run.join("baseline.teacher.ckpt").exists());
}

#[test]
fn resolved_config_reproduces_the_run() {
    let f = fixture();
    let a = f.root.join("a");
    let b = f.root.join("b");
    ok(&["train", "--config", s(&f.config), "--seed", "3", "--data", s(&f.data), "--out", s(&a)]);
    let resolved = a.join("config.toml");
    let text = fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("seed = 3"));
    ok(&["train", "--config", s(&resolved), "--data", s(&f.data), "--out", s(&b)]);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("original.student.ckpt")).unwrap(),
        fs::read(b.join("original.student.ckpt")).unwrap()
    );
}

#[test]
fn refuses_non_empty_output_without_force() {
    let f = fixture();
    let out = f.root.join("data");
    let err = fails(&["gen-data", "--config", s(&f.config), "--out", s(&out)]);
    assert!(err.contains("--force"), "{err}");
    ok(&["gen-data", "--config", s(&f.config), "--out", s(&out), "--force"]);
}

#[test]
fn failure_removes_partial_outputs() {
    let f = fixture();
    let cfg = f.root.join("bad.toml");
    fs::write(&cfg, TINY.replace("lr = 0.01", "lr = 1e300")).unwrap();
    let run = f.root.join("diverged");
    fails(&["train", "--config", s(&cfg), "--data", s(&f.data), "--out", s(&run)]);
    assert!(!run.exists());
}

#[test]
fn bad_inputs_are_single_line_errors() {
    let f = fixture();
    let cfg = f.root.join("typo.toml");
    fs::write(&cfg, "[train]\nalpah = 0.3\n").unwrap();
    let err = fails(&["gen-data", "--config", s(&cfg), "--out", s(&f.root.join("x"))]);
    assert!(err.contains("alpah"), "{err}");
    fails(&["train", "--data", s(&f.root.join("missing.bscc")), "--out", s(&f.root.join("y"))]);
    fails(&["no-such-command"]);
    fails(&["gen-data"]);
    assert!(!f.root.join("x").exists() && !f.root.join("y").exists());
}

#[test]
fn eval_of_empty_detections_scores_zero() {
    let f = fixture();
    let dets = f.root.join("empty.csv");
    fs::write(&dets, "video_id,class,start,end,conf\n").unwrap();
    let ev = f.root.join("eval");
    ok(&["eval", "--config", s(&f.config), "--data", s(&f.data), "--detections", s(&dets), "--out", s(&ev)]);
    for row in csv_rows(&ev.join("map.csv")) {
        assert_eq!(row[1].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn sweep_emits_one_row_per_value() {
    let f = fixture();
    let out = f.root.join("sweep");
    ok(&[
        "sweep", "--config", s(&f.config), "--data", s(&f.data), "--param", "alpha", "--values", "0,0.1,0.25,0.5",
        "--out", s(&out),
    ]);
    let rows = csv_rows(&out.join("sweep.csv"));
    let values: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(values, ["0", "0.1", "0.25", "0.5"]);
    assert!(rows.iter().all(|r| r[0] == "alpha"));
    assert!(out.join("alpha=0.25").join("config.toml").exists());
    let err = fails(&[
        "sweep", "--config", s(&f.config), "--data", s(&f.data), "--param", "ctg_mode", "--values", "max,median",
        "--out", s(&f.root.join("bad")),
    ]);
    assert!(err.contains("median"), "{err}");
}

#[test]
fn report_writes_valid_deterministic_svg() {
    let f = fixture();
    let run = f.root.join("run");
    ok(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&run)]);
    let r1 = f.root.join("r1");
    let r2 = f.root.join("r2");
    ok(&["report", "--config", s(&f.config), "--run", s(&run), "--out", s(&r1)]);
    ok(&["report", "--config", s(&f.config), "--run", s(&run), "--out", s(&r2)]);
    let mut svgs: Vec<PathBuf> = fs::read_dir(&r1)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "svg"))
        .collect();
    svgs.sort();
    assert_eq!(svgs.len(), 3);
    for p in &svgs {
        let text = fs::read_to_string(p).unwrap();
        let doc = roxmltree::Document::parse(&text).expect("well-formed SVG");
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert!(doc.descendants().any(|n| n.has_tag_name("polyline")));
        assert_eq!(text, fs::read_to_string(r2.join(p.file_name().unwrap())).unwrap());
    }
    let summary = csv_rows(&r1.join("summary.csv"));
    assert_eq!(summary.len(), 2);
    assert_eq!(summary[0][0], "baseline");
    assert_eq!(summary[1][0], "biscc");
}

#[test]
fn report_needs_run_artifacts() {
    let f = fixture();
    fails(&["report", "--run", s(&f.root.join("nothing")), "--out", s(&f.root.join("r"))]);
    assert!(!f.root.join("r").exists());
}
