use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use focustrack::autodiff::GradientTape;
use focustrack::model::{init_params, ModelConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_focustrack"))
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Two 12-frame synthetic sequences and freshly initialized weights.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(bin()
        .args(["synth", "--seed", "11", "--count", "2", "--out"])
        .arg(&data)
        .arg("--spec")
        .arg(write_json(dir, "spec.json", r#"{"frames": 12}"#))
        .output()
        .unwrap());
    let weights = dir.join("w.ntc1");
    let tape: GradientTape<f32> = init_params(&ModelConfig::toy(), 0).unwrap();
    focustrack::ntc1::save(&tape, None, &weights).unwrap();
    (data, weights)
}

fn write_json(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn track(weights: &Path, seq: &Path, out: &Path, extra: &[&str]) -> String {
    ok(bin()
        .arg("track")
        .arg("--weights")
        .arg(weights)
        .arg("--seq")
        .arg(seq)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap())
}

/// Data rows of a CSV written with a leading config comment.
fn rows(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config: {"));
    lines.skip(1).map(str::to_string).collect()
}

#[test]
fn track_writes_one_row_per_tracked_frame() {
    let dir = tempfile::tempdir().unwrap();
    let (data, weights) = fixture(dir.path());
    let out = dir.path().join("out");
    let echoed = track(&weights, &data, &out, &[]);
    assert!(echoed.starts_with("effective config: {"));
    for name in ["synth_0011", "synth_0012"] {
        assert_eq!(rows(&out.join(format!("{name}_trace.csv"))).len(), 11);
        let res: serde_json::Value = serde_json::from_slice(&fs::read(out.join(format!("{name}.json"))).unwrap()).unwrap();
        assert_eq!(res["res"].as_array().unwrap().len(), 12);
        assert_eq!(res["config"]["use_sra"], true);
    }
}

#[test]
fn disabling_sra_keeps_the_factor_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let (data, weights) = fixture(dir.path());
    let out = dir.path().join("out");
    let echoed = track(&weights, &data.join("synth_0011"), &out, &["--use-sra", "false"]);
    assert!(echoed.contains(r#""use_sra":false"#));
    for r in rows(&out.join("synth_0011_trace.csv")) {
        assert_eq!(r.split(',').nth(7).unwrap(), "6.000");
    }
}

#[test]
fn tracking_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, weights) = fixture(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    track(&weights, &data, &a, &[]);
    track(&weights, &data, &b, &["--use-window", "true"]);
    for f in ["synth_0011.json", "synth_0011_trace.csv", "synth_0012.json", "synth_0012_trace.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_scores_track_output() {
    let dir = tempfile::tempdir().unwrap();
    let (data, weights) = fixture(dir.path());
    let res = dir.path().join("res");
    track(&weights, &data, &res, &[]);
    let metrics = dir.path().join("m.json");
    let stdout = ok(bin().arg("eval").arg("--results").arg(&res).arg("--ann").arg(&data).arg("--out").arg(&metrics).output().unwrap());
    assert!(stdout.contains("(2 sequences)"));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(&metrics).unwrap()).unwrap();
    for k in ["auc", "p20", "pnorm", "sa"] {
        let v = m[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
    assert_eq!(m["per_sequence"].as_object().unwrap().len(), 2);
    assert!(m["config"].is_object());
    assert!(!rows(&dir.path().join("m.curves.csv")).is_empty());
}

#[test]
fn train_writes_trace_and_loadable_weights() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = fixture(dir.path());
    let cfg = write_json(dir.path(), "c.json", r#"{"steps": 3, "batch": 2, "probe_pairs": 4}"#);
    let w = dir.path().join("trained.ntc1");
    ok(bin().arg("train").arg("--config").arg(&cfg).arg("--data").arg(&data).arg("--out").arg(&w).output().unwrap());
    let (tape, manifest) = focustrack::ntc1::load::<f32>(&w).unwrap();
    focustrack::model::check_params(&ModelConfig::toy(), &tape).unwrap();
    assert_eq!(manifest.meta.unwrap()["config"]["steps"], 3);
    let trace = rows(&dir.path().join("trained.loss.csv"));
    assert_eq!(trace.len(), 3);
    assert!(trace.iter().all(|r| r.split(',').count() == 7));
}

#[test]
fn train_refuses_full_preset_and_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = fixture(dir.path());
    let run = |cfg: &str| {
        let c = write_json(dir.path(), "c.json", cfg);
        bin().arg("train").arg("--config").arg(&c).arg("--data").arg(&data).arg("--out").arg(dir.path().join("x.ntc1")).output().unwrap()
    };
    let full = run(r#"{"preset": "full"}"#);
    assert!(!full.status.success());
    assert!(String::from_utf8_lossy(&full.stderr).contains("--i-know"));
    assert!(!run(r#"{"lr_heads": 0.0}"#).status.success());
    let typo = run(r#"{"use_sar": false}"#);
    assert!(!typo.status.success());
    assert!(String::from_utf8_lossy(&typo.stderr).contains("use_sar"));
    assert!(!dir.path().join("x.ntc1").exists());
}

#[test]
fn macs_reports_both_variants() {
    let total = |args: &[&str]| -> u64 {
        let s = ok(bin().arg("macs").args(args).output().unwrap());
        let line = s.lines().find(|l| l.starts_with("total")).unwrap();
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    let full = total(&["--preset", "full"]);
    let base = total(&["--preset", "full", "--baseline"]);
    assert!(full > base && (full - base) * 20 < base);
    assert!(total(&["--preset", "toy"]) < base / 100);
}

#[test]
fn synth_output_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = fixture(dir.path());
    let seq = focustrack::synthdata::load_sequence(&data.join("synth_0012"), 1).unwrap();
    assert_eq!(seq.len(), 12);
    let spec: serde_json::Value = serde_json::from_slice(&fs::read(data.join("synth_0012/spec.json")).unwrap()).unwrap();
    assert_eq!(spec["seed"], 12);
}

#[test]
fn missing_inputs_fail_with_a_diagnostic() {
    let out = bin().args(["track", "--weights", "/nonexistent/w.ntc1", "--seq", "/nonexistent", "--out", "/tmp/never"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}
