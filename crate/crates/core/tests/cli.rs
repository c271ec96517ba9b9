use std::path::Path;
use std::process::{Command, Output};

use sagesim::io::{read_sidecar, read_tensor};

fn sagesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sagesim")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_is_deterministic_and_writes_a_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    for out in [&a, &b] {
        let o = sagesim(&["gen", "--shape", "2,16,8", "--seed", "9", "--out", path(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let meta = read_sidecar(&a).unwrap();
    assert_eq!(meta.shape, vec![2, 16, 8]);
    assert_eq!(meta.seed, 9);
    assert_eq!(read_tensor(&a).unwrap().shape(), &[2, 16, 8]);
}

#[test]
fn gen_uniform_and_adversarial() {
    let dir = tempfile::tempdir().unwrap();
    let u = dir.path().join("u.bin");
    let o = sagesim(&["gen", "--shape", "4096", "--dist", "uniform", "--low", "-2", "--high", "3", "--out", path(&u)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read_tensor(&u).unwrap().as_slice().iter().all(|&x| (-2.0..3.0).contains(&x)));

    let adv = dir.path().join("adv.bin");
    let o = sagesim(&["gen", "--shape", "8,8", "--dist", "adversarial", "--out", path(&adv)]);
    assert!(o.status.success());
    assert!(read_tensor(&adv).unwrap().as_slice().iter().all(|&x| x == 448.0));
}

#[test]
fn gen_rejects_bad_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.bin");
    assert!(!sagesim(&["gen", "--shape", "0,4", "--out", path(&out)]).status.success());
    assert!(!sagesim(&["gen", "--shape", "1,2,3,4,5", "--out", path(&out)]).status.success());
}

fn run_json(args: &[&str]) -> (bool, serde_json::Value) {
    let o = sagesim(args);
    let v = serde_json::from_slice(&o.stdout).unwrap_or(serde_json::Value::Null);
    (o.status.success(), v)
}

#[test]
fn run_defaults_do_not_overflow() {
    let (ok, v) = run_json(&["run", "--seed", "3", "--seq-len", "128", "--head-dim", "64"]);
    assert!(ok);
    assert_eq!(v["overflow_events"], 0);
    assert!(v["cossim"].as_f64().unwrap() > 0.999);
}

#[test]
fn run_with_files_matches_seeded_run_shape() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for (name, seed) in [("q", "1"), ("k", "2"), ("v", "3")] {
        let p = dir.path().join(format!("{name}.bin"));
        assert!(sagesim(&["gen", "--shape", "1,40,24", "--seed", seed, "--out", path(&p)]).status.success());
        files.push(p);
    }
    let (ok, v) = run_json(&["run", "--q", path(&files[0]), "--k", path(&files[1]), "--v", path(&files[2])]);
    assert!(ok);
    assert_eq!(v["seq_len"], 40);
    assert_eq!(v["head_dim"], 24);
    assert!(v["seed"].is_null());
}

#[test]
fn run_overflow_witness_and_unexpected_overflow() {
    let base = ["run", "--seq-len", "64", "--head-dim", "32", "--dist", "adversarial", "--p-r", "448", "--v-r", "448"];
    let (ok, v) = run_json(&[&base[..], &["--expect-overflow"]].concat());
    assert!(ok);
    assert!(v["overflow_events"].as_u64().unwrap() > 0);
    // Without the waiver the range is rejected up front.
    let o = sagesim(&base);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn run_single_token_and_fp32() {
    let (ok, v) = run_json(&["run", "--seq-len", "1", "--head-dim", "16"]);
    assert!(ok);
    assert_eq!(v["seq_len"], 1);
    let (ok, v) = run_json(&[
        "run",
        "--seq-len",
        "64",
        "--head-dim",
        "32",
        "--accumulator",
        "fp32",
        "--p-r",
        "448",
        "--v-r",
        "448",
    ]);
    assert!(ok);
    assert_eq!(v["conversions"], 0);
}

#[test]
fn sweep_grid_rejects_points_above_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        r#"{"input": {"seeded": {"seed": 1, "heads": 1, "seq_len": 64, "head_dim": 32}},
            "grid": {"p_r": [224, 448], "v_r": [2.25, 4.5], "depth": 2}}"#,
    )
    .unwrap();
    let out = dir.path().join("out.csv");
    let o = sagesim(&["sweep", path(&spec), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("rejected p_r=448 v_r=4.5"));
}

#[test]
fn sweep_with_empty_grid_writes_only_a_header() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        r#"{"input": {"seeded": {"seed": 1, "heads": 1, "seq_len": 8, "head_dim": 8}},
            "grid": {"p_r": [], "v_r": [4.5], "depth": 2}}"#,
    )
    .unwrap();
    let o = sagesim(&["sweep", path(&spec)]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("p_r,v_r,depth"));
}

#[test]
fn codec_table_lists_every_code() {
    let o = sagesim(&["codec-table"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("0x")).collect();
    assert_eq!(rows.len(), 256);
    assert!(rows.contains(&"0x7e,448.0"));
    assert!(rows.contains(&"0x7f,NaN"));
}
