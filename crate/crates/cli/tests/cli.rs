use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pemvc_cli::report::Report;
use pemvc_cli::RunSpec;

const TINY: &str = r#"
seed = 2
out_dir = "unused"
checkpoints = [30, 60, 90]

[pairs]
windows_per_pair = 1
windows_per_segment = 1

[model]
d_model = 8
n_heads = 2
n_enc_layers = 1
n_dec_layers = 1
d_ff = 16

[train]
batch_size = 4
epochs = 1
lr = 1e-3
samples_per_epoch = 4

[[runs]]
name = "r1"
profile = "on_off"
rates = "ohmic"

[[runs]]
name = "r2"
profile = "load_unload"
rates = "ohmic"

[[runs]]
name = "r3"
profile = "load_unload"
rates = "kinetic"

[[runs]]
name = "r4"
profile = "load_unload"
rates = { k_r = 2e-4, k_j = 8e-4 }
"#;

fn pemvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pemvc")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pemvc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("spec.toml");
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path to contents, for every file under `dir`.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_twice_gives_identical_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["simulate", "--config", s(&cfg), "--out", s(&a), "--run-index", "1"]);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&b), "--run-index", "1"]);
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert_eq!(sa.len(), 3 + 4 + 1);
    assert_eq!(sa, sb);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&b), "--run-index", "2"]);
    assert_ne!(snapshot(&b), sa);
}

#[test]
fn staged_pipeline_and_config_guard() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let p = |n: &str| tmp.path().join(n);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&p("run"))]);
    ok(&["prepare", "--run", s(&p("run")), "--out", s(&p("data")), "--config", s(&cfg)]);
    ok(&["train", "--data", s(&p("data")), "--model", "patch", "--out", s(&p("model")), "--config", s(&cfg), "--quiet"]);
    let history = fs::read_to_string(p("model/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
    let ckpt = p("model/best.ckpt");

    let text = ok(&["eval", "--data", s(&p("data")), "--ckpt", s(&ckpt), "--report", s(&p("eval"))]);
    assert!(text.contains("validation | OP-POL"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("eval/eval.json")).unwrap()).unwrap();
    for split in ["train", "val"] {
        for task in ["op_op", "op_pol"] {
            assert!(json[split][task]["normalized"].as_f64().unwrap() > 0.0);
        }
    }
    ok(&["eval", "--data", s(&p("data")), "--ckpt", s(&ckpt), "--report", s(&p("eval")), "--config", s(&cfg), "--model", "patch"]);

    // same file, asked for as the other variant
    let out = pemvc(&["eval", "--data", s(&p("data")), "--ckpt", s(&ckpt), "--report", s(&p("e2")), "--config", s(&cfg), "--model", "vanilla"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("eval") && err.contains("trained with config"), "{err}");
    assert!(!p("e2").exists());

    ok(&["predict-pol", "--run", s(&p("run")), "--ckpt", s(&ckpt), "--checkpoint-index", "2", "--out", s(&p("pp"))]);
    let csv = fs::read_to_string(p("pp/curves.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("j_A_cm2,v_pred_V,v_meas_V,cycle_index"));
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",90")));
    assert_eq!(fs::read_to_string(p("pp/voltage.csv")).unwrap().lines().count(), 12001);
    assert!(fs::read_to_string(p("pp/curves.svg")).unwrap().starts_with("<svg"));

    let out = pemvc(&["predict-pol", "--run", s(&p("run")), "--ckpt", s(&ckpt), "--checkpoint-index", "3", "--out", s(&p("pp"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stats_from_other_data_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let p = |n: &str| tmp.path().join(n);
    for (i, name) in ["0", "1"].iter().enumerate() {
        ok(&["simulate", "--config", s(&cfg), "--out", s(&p(&format!("run{name}"))), "--run-index", &i.to_string()]);
        ok(&["prepare", "--run", s(&p(&format!("run{name}"))), "--out", s(&p(&format!("data{name}")))]);
    }
    ok(&["train", "--data", s(&p("data0")), "--model", "vanilla", "--out", s(&p("m")), "--config", s(&cfg), "--quiet"]);
    let out = pemvc(&["eval", "--data", s(&p("data1")), "--ckpt", s(&p("m/best.ckpt")), "--report", s(&p("e"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_config_fails_before_side_effects() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("never");
    let bad = TINY.replace("[train]", "[train]\nmomentum = 0.9");
    let cfg = write_config(tmp.path(), &bad);
    let out = pemvc(&["reproduce", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
    assert!(!out_dir.exists());

    let out = pemvc(&["simulate", "--config", s(&tmp.path().join("missing.toml")), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    let out = pemvc(&["train", "--data", "x", "--model", "lstm", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn reproduce_writes_every_artifact_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("out");
    let text = ok(&["reproduce", "--config", s(&cfg), "--out", s(&out), "--quiet"]);
    assert!(text.contains("best run"));

    let files = snapshot(&out);
    let count = |name: &str| files.iter().filter(|(p, _)| p.file_name().unwrap() == name).count();
    assert_eq!(count("best.ckpt"), 8);
    assert_eq!(count("history.csv"), 8);
    assert_eq!(count("curves.csv"), 8);
    assert_eq!(count("report.md"), 1);

    let report: Report = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.runs.len(), 4);
    let spec = RunSpec::parse(TINY).unwrap();
    assert_eq!(report.seed, spec.seed);
    let md = fs::read_to_string(out.join("report.md")).unwrap();
    assert!(md.contains("## AST curve prediction error") && md.contains("## Polarization curve prediction error"));
    assert!(md.contains("| | r1 | r2 | r3 | r4 |"));

    ok(&["reproduce", "--config", s(&cfg), "--out", s(&out), "--quiet"]);
    assert_eq!(snapshot(&out), files);
}

#[test]
fn staged_commands_match_reproduce() {
    let tmp = tempfile::tempdir().unwrap();
    let one_run = TINY.split("[[runs]]").take(3).collect::<Vec<_>>().join("[[runs]]");
    let cfg = write_config(tmp.path(), &one_run);
    let p = |n: &str| tmp.path().join(n);
    ok(&["reproduce", "--config", s(&cfg), "--out", s(&p("rep")), "--quiet"]);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&p("run")), "--run-index", "1"]);
    ok(&["prepare", "--run", s(&p("run")), "--out", s(&p("data")), "--config", s(&cfg)]);
    ok(&["train", "--data", s(&p("data")), "--model", "vanilla", "--out", s(&p("m")), "--config", s(&cfg), "--run-index", "1", "--quiet"]);
    for f in ["best.ckpt", "history.csv"] {
        assert_eq!(fs::read(p("m").join(f)).unwrap(), fs::read(p("rep/r2/vanilla").join(f)).unwrap(), "{f}");
    }
}
