use std::path::Path;
use std::process::{Command, Output};

fn dsat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dsat(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = "\
# smallest model
image_size = 16
heatmap_size = 16
channels = 2
stacks = 1
dsa_placement = 0
cca_depth = 1
cca_heads = 2
iterations = 3
batch_size = 2
train_samples = 4
heldout_samples = 4
";

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("run/model.json");
    let report = dir.path().join("eval/report.json");
    let stats = dir.path().join("eval/gates.csv");

    let out = ok(&[
        "gen-data",
        "--out",
        p(&data),
        "--count",
        "6",
        "--seed",
        "3",
        "--image-size",
        "16",
        "--mix",
        "neutral:0.5,blurred:0.5",
    ]);
    assert!(out.contains("wrote 6 samples"));
    assert!(data.join("index.json").exists());
    assert!(data.join("sample_00005.bin").exists());

    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&ckpt),
        "--data",
        p(&data),
    ]);
    assert!(ckpt.exists());
    assert!(dir.path().join("run/model.bin").exists());
    let curve = std::fs::read_to_string(dir.path().join("run/model.loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);

    let out = ok(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--report",
        p(&report),
    ]);
    assert!(out.contains("NME"));
    let gates = std::fs::read_to_string(dir.path().join("eval/report.gates.csv")).unwrap();
    assert_eq!(gates.lines().count(), 7);
    assert!(gates.ends_with(",2\n"));

    ok(&["gate-stats", "--report", p(&report), "--out", p(&stats)]);
    let csv = std::fs::read_to_string(&stats).unwrap();
    assert!(csv.starts_with("cluster,dsa_index,count,mean,std\n"));
    assert!(csv.contains("neutral,0,3,"));
    assert!(csv.contains("blurred,0,3,"));
}

#[test]
fn grad_check_reports_the_worst_entry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = ok(&["grad-check", "--config", p(&cfg), "--tol", "1e-3"]);
    assert!(out.contains("max relative error"));
    assert!(out.contains("worst:"));
}

#[test]
fn ablate_prints_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let results = dir.path().join("ablation.json");
    let out = ok(&[
        "ablate",
        "--config",
        p(&cfg),
        "--variants",
        "shn,dsat",
        "--seeds",
        "0",
        "--set",
        "iterations=1",
        "--out",
        p(&results),
    ]);
    assert!(out.contains("mean shn"));
    assert!(out.contains("mean dsat"));
    let json = std::fs::read_to_string(&results).unwrap();
    assert!(json.contains("\"variant\": \"dsat\""));
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "image_sise = 16\n").unwrap();
    let out = dsat(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("m.json")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("image_sise"));

    let out = dsat(&["ablate", "--variants", "shn+cca"]);
    assert!(!out.status.success());

    let out = dsat(&[
        "eval",
        "--checkpoint",
        p(&dir.path().join("missing.json")),
        "--data",
        p(dir.path()),
        "--report",
        p(&dir.path().join("r.json")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}
