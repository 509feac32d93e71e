use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn uadt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uadt"))
        .args(args)
        .env_remove("UADT_THREADS")
        .output()
        .expect("spawn uadt")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn failure(out: &Output, code: i32) -> Value {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let line = String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string();
    serde_json::from_str(&line).unwrap_or_else(|e| panic!("structured error expected, got `{line}`: {e}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_MODEL: &str = r#"
[model]
token_dim = 16
depth = 1
heads = 2
pose_channels = 8

[model.pose_encoder]
channels = [4, 4, 4, 8, 8, 8, 8]

[model.ref_pose_encoder]
channels = [4, 3]
kernel = 3
strides = [4, 2]
"#;

fn small_dataset(dir: &Path, clips: &str) {
    ok(&uadt(&["gen-data", "--out", p(dir), "--clips", clips, "--seed", "3", "--size", "16x16", "--frames", "9", "--radius", "3"]));
}

fn train_small(root: &Path, steps: usize, lr: f64) -> Output {
    let cfg = format!("dataset = \"data\"\noutput = \"run\"\n{SMALL_MODEL}\n[train]\nsteps = {steps}\nlr = {lr}\n");
    fs::write(root.join("run.toml"), cfg).unwrap();
    uadt(&["train", "--config", p(&root.join("run.toml"))])
}

#[test]
fn plan_windows_matches_golden_table() {
    let out = ok(&uadt(&["plan-windows", "--latent-frames", "9", "--window", "5", "--discard", "2"]));
    assert_eq!(out, include_str!("golden/plan_9_5_2.txt"));
}

#[test]
fn plan_windows_rejects_window_not_exceeding_discard() {
    let err = failure(&uadt(&["plan-windows", "--latent-frames", "9", "--window", "2", "--discard", "2"]), 2);
    assert_eq!(err["kind"], "config");
}

#[test]
fn gen_data_single_clip_has_four_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&uadt(&["gen-data", "--out", p(d), "--clips", "1", "--seed", "7"]));
    }
    let clip = a.join("clip_0000");
    let mut names: Vec<String> = fs::read_dir(&clip)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["poses.json", "reference.ppm", "spec.json", "video.uadt"]);
    for name in ["manifest.json", "clip_0000/poses.json", "clip_0000/reference.ppm", "clip_0000/spec.json", "clip_0000/video.uadt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn gen_data_invalid_frame_count_lists_valid_options() {
    let dir = tempfile::tempdir().unwrap();
    let err = failure(&uadt(&["gen-data", "--out", p(dir.path()), "--clips", "1", "--frames", "18"]), 2);
    assert_eq!(err["kind"], "validation");
    assert!(err["message"].as_str().unwrap().contains("17 or 21"), "{err}");
}

#[test]
fn bad_thread_cap_is_a_validation_failure() {
    let out = Command::new(env!("CARGO_BIN_EXE_uadt"))
        .args(["plan-windows", "--latent-frames", "9", "--window", "5"])
        .env("UADT_THREADS", "0")
        .output()
        .unwrap();
    failure(&out, 2);
}

#[test]
fn train_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(&dir.path().join("data"), "1");
    let cfg = "dataset = \"data\"\noutput = \"run\"\n[train]\nsteps = 1\nlearning_rate = 0.1\n";
    fs::write(dir.path().join("run.toml"), cfg).unwrap();
    let err = failure(&uadt(&["train", "--config", p(&dir.path().join("run.toml"))]), 2);
    assert_eq!(err["kind"], "config");
    assert!(err["message"].as_str().unwrap().contains("learning_rate"), "{err}");
}

#[test]
fn diverging_training_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(&dir.path().join("data"), "1");
    let err = failure(&train_small(dir.path(), 150, 1e9), 3);
    assert_eq!(err["kind"], "numerical");
}

#[test]
fn train_animate_and_report_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_dataset(&root.join("data"), "2");
    ok(&train_small(root, 4, 1e-3));
    let run = root.join("run");
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(csv.starts_with("stage,step,loss\ntrain,0,"));
    let ckpt = run.join("model.uadt");

    let clip = root.join("data/clip_0000");
    let frames_dir = root.join("frames");
    ok(&uadt(&[
        "animate", "--checkpoint", p(&ckpt), "--ref", p(&clip.join("reference.ppm")),
        "--poses", p(&clip.join("poses.json")), "--steps", "3", "--out", p(&frames_dir),
    ]));
    for t in 0..9 {
        assert!(frames_dir.join(format!("frame_{t:04}.ppm")).exists());
    }

    let err = failure(
        &uadt(&[
            "animate", "--checkpoint", p(&ckpt), "--ref", p(&clip.join("reference.ppm")),
            "--poses", p(&clip.join("poses.json")), "--frames", "13", "--out", p(&frames_dir),
        ]),
        2,
    );
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("9 frames") && msg.contains("expected 13"), "{msg}");

    let long_dir = root.join("long");
    ok(&uadt(&[
        "animate-long", "--checkpoint", p(&ckpt), "--ref", p(&clip.join("reference.ppm")),
        "--poses", p(&clip.join("poses.json")), "--window", "2", "--discard", "1", "--steps", "2", "--out", p(&long_dir),
    ]));
    let plan: Value = serde_json::from_str(&fs::read_to_string(long_dir.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["windows"].as_array().unwrap().len(), 2);

    let report_path = root.join("report.json");
    let table = ok(&uadt(&[
        "report", "--checkpoint", p(&ckpt), "--dataset", p(&root.join("data")), "--steps", "2", "--out", p(&report_path),
    ]));
    assert!(table.contains("clip_0001") && table.contains("seam ratio"));
    let report: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    let mut keys = BTreeSet::new();
    schema(&report, "", &mut keys);
    let got: Vec<&str> = keys.iter().map(String::as_str).collect();
    let want: BTreeSet<&str> = include_str!("golden/report_schema.txt").lines().collect();
    let want: Vec<&str> = want.into_iter().collect();
    assert_eq!(got, want);
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["long_video"]["windows"], 3);
}

/// Flattens a JSON document into `path: type` lines, folding array items.
fn schema(v: &Value, path: &str, out: &mut BTreeSet<String>) {
    let kind = match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    };
    if !path.is_empty() && !matches!(v, Value::Array(_)) {
        out.insert(format!("{path}: {kind}"));
    }
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                schema(child, &p, out);
            }
        }
        Value::Array(items) => {
            for child in items {
                schema(child, &format!("{path}[]"), out);
            }
        }
        _ => {}
    }
}

#[test]
fn check_grads_single_seed_passes() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("grads.json");
    let out = ok(&uadt(&["check-grads", "--seed", "5", "--seeds", "1", "--json", p(&json)]));
    assert!(out.contains("dit_forward") && out.trim_end().ends_with("PASS"), "{out}");
    let v: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["cases"].as_array().unwrap().len(), 22);
}
