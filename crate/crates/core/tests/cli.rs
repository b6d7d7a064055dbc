//! End-to-end runs of the `coca-lab` binary on a tiny model.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "seed": 11,
  "model": {"preset": "tiny", "vocab_size": 259, "max_seq": 32},
  "train": {"total_steps": 6, "batch_size": 2, "seq_len": 16, "checkpoint_every": 3},
  "data": {"kind": "copy", "tokens": 2000}
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_coca-lab"));
    c.env("COCA_LAB_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

/// step, lr and loss columns; throughput and timing vary between runs.
fn deterministic_metrics(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("metrics.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
        .collect()
}

#[test]
fn train_twice_gives_identical_metrics_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["--config", s(&cfg), "--out", s(&a), "train"]);
    ok(&["--config", s(&cfg), "--out", s(&b), "train"]);
    assert_eq!(deterministic_metrics(&a), deterministic_metrics(&b));
    assert_eq!(deterministic_metrics(&a).len(), 7);
    let ck = "step-000006.ckpt";
    assert_eq!(std::fs::read(a.join(ck)).unwrap(), std::fs::read(b.join(ck)).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    ok(&["--config", s(&cfg), "--out", s(&full), "train"]);
    ok(&["--config", s(&cfg), "--out", s(&part), "train", "--stop-after", "3"]);
    let ck = part.join("step-000003.ckpt");
    ok(&["--config", s(&cfg), "--out", s(&part), "train", "--resume", s(&ck)]);
    let last = "step-000006.ckpt";
    assert_eq!(std::fs::read(full.join(last)).unwrap(), std::fs::read(part.join(last)).unwrap());
    assert_eq!(deterministic_metrics(&full), deterministic_metrics(&part));
}

#[test]
fn train_without_seed_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["--out", s(&tmp.path().join("x")), "train"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\"seed\": 1,\n \"train\": {\"lr_peek\": 1}}").unwrap();
    let o = run(&["--config", s(&bad), "--out", s(&tmp.path().join("y")), "train"]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(!o.status.success() && err.contains("lr_peek") && err.contains("line 2"), "{err}");
}

#[test]
fn non_empty_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    let args = ["--out", s(&out), "bench", "contraction", "--sq", "4", "--sk", "4", "--d", "8", "--reps", "1"];
    ok(&args);
    assert!(!run(&args).status.success());
    let mut forced = vec!["--force"];
    forced.extend_from_slice(&args);
    ok(&forced);
    let csv = std::fs::read_to_string(out.join("contraction.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
}

#[test]
fn eval_inspect_and_diagnose_on_a_trained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run_dir = tmp.path().join("run");
    ok(&["--config", s(&cfg), "--out", s(&run_dir), "train"]);
    let ck = run_dir.join("step-000006.ckpt");

    let info = ok(&["inspect", "checkpoint", s(&ck)]);
    let info: serde_json::Value = serde_json::from_str(&info).unwrap();
    assert_eq!(info["step"], 6);

    let ppl = |kappa: &str, dir: &str| {
        let out = tmp.path().join(dir);
        ok(&[
            "--seed",
            "3",
            "--out",
            s(&out),
            "eval",
            "ppl",
            "--checkpoint",
            s(&ck),
            "--contexts",
            "8,16,32",
            "--docs",
            "2",
            "--doc-tokens",
            "64",
            "--ntk-kappa",
            kappa,
        ]);
        std::fs::read_to_string(out.join("ppl.csv")).unwrap()
    };
    // kappa 1 leaves the table unchanged
    let plain = ppl("1", "ppl-a");
    assert_eq!(plain, ppl("1.0", "ppl-b"));
    assert_eq!(plain.lines().next(), Some("context,ppl"));
    assert_eq!(plain.lines().count(), 4);

    let out = tmp.path().join("pk");
    ok(&[
        "--seed",
        "3",
        "--out",
        s(&out),
        "eval",
        "passkey",
        "--checkpoint",
        s(&ck),
        "--lengths",
        "100",
        "--n",
        "3",
        "--ntk-kappa",
        "2",
    ]);
    let pk = std::fs::read_to_string(out.join("passkey.csv")).unwrap();
    assert!(pk.starts_with("length,n,accuracy\n100,3,"), "{pk}");

    for (kind, extra) in [("order", vec![]), ("borders", vec![]), ("decay", vec!["--samples", "3", "--coca"])] {
        let out = tmp.path().join(kind);
        let mut args = vec!["--seed", "5", "--out", s(&out), "diagnose", kind, "--s-max", "64"];
        args.extend(extra);
        ok(&args);
        assert!(std::fs::read_dir(&out).unwrap().count() >= 2, "{kind} wrote too little");
    }
    let out = tmp.path().join("order-ck");
    ok(&["--seed", "5", "--out", s(&out), "diagnose", "order", "--checkpoint", s(&ck), "--s-max", "16"]);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(!run(&["inspect", "checkpoint", s(&tmp.path().join("missing.ckpt"))]).status.success());
    let junk = tmp.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert!(!run(&["inspect", "checkpoint", s(&junk)]).status.success());
    assert!(!run(&["diagnose", "sideways"]).status.success());
    let out = tmp.path().join("b");
    assert!(!run(&["--out", s(&out), "bench", "contraction", "--reps", "0"]).status.success());
}
