use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coupling_core::dump::{DType, SampleArray};
use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_coupling"));
    cmd.env_remove("COUPLING_DATA_DIR").env_remove("COUPLING_DETERMINISTIC");
    cmd
}

fn invoke(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Output {
    let out = invoke(args);
    assert_eq!(code(&out), 0, "{args:?}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny toy-pair config so the pipeline runs in seconds.
fn toy_config(dir: &Path, epochs: usize) -> PathBuf {
    let path = dir.join(format!("toy{epochs}.toml"));
    std::fs::write(
        &path,
        format!(
            "profile = \"toy-pair\"\n[data]\nnum_examples = 512\n[stage_a]\nepochs = {epochs}\n\
             [stage_b]\nepochs = {epochs}\n[mdm]\nepochs = {epochs}\n"
        ),
    )
    .unwrap();
    path
}

fn trained_run(root: &Path) -> PathBuf {
    let cfg = toy_config(root, 2);
    let run = root.join("run");
    ok(&["train", "a", "--config", s(&cfg), "--out", s(&run)]);
    ok(&["train", "b", "--config", s(&cfg), "--out", s(&run)]);
    ok(&["train", "mdm", "--config", s(&cfg), "--out", s(&run)]);
    run
}

#[test]
fn pipeline_counts_network_evaluations() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained_run(tmp.path());
    let m = manifest(&run);
    let kinds: Vec<&str> = m["checkpoints"].as_array().unwrap().iter().map(|c| c["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["a", "b", "mdm"]);
    for c in m["checkpoints"].as_array().unwrap() {
        assert!(run.join(c["path"].as_str().unwrap()).exists());
    }

    let one = tmp.path().join("one");
    ok(&["sample", "--checkpoint", s(&run.join("stage_b.ckpt")), "--n", "1000", "--out", s(&one)]);
    assert_eq!(manifest(&one)["nfe"], 1000);
    let dump = SampleArray::read(&one.join("samples.cmsd")).unwrap();
    assert_eq!(dump.dims, vec![1000, 2]);
    assert_eq!(std::fs::read_to_string(one.join("samples.txt")).unwrap().lines().count(), 1000);

    let few = tmp.path().join("few");
    ok(&[
        "sample", "--checkpoint", s(&run.join("mdm.ckpt")), "--mode", "p2self", "--steps", "4", "--n", "100",
        "--out", s(&few),
    ]);
    assert_eq!(manifest(&few)["nfe"], 400);

    // p2self needs a denoiser checkpoint.
    let bad = invoke(&["sample", "--checkpoint", s(&run.join("stage_b.ckpt")), "--mode", "p2self", "--out", s(&few)]);
    assert_eq!(code(&bad), 2);

    let latent = tmp.path().join("latent");
    ok(&[
        "guide", "--checkpoint", s(&run.join("stage_b.ckpt")), "--mode", "latent", "--steps", "3", "--n", "20",
        "--out", s(&latent),
    ]);
    assert_eq!(manifest(&latent)["nfe"], 20 * 4);

    let report = ok(&["report", s(&run), s(&one)]);
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.contains("stage_b.ckpt") && text.contains("NFE: 1000"));
}

#[test]
fn fixed_seed_gives_identical_dumps() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained_run(tmp.path());
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (dir, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        ok(&["sample", "--checkpoint", s(&run.join("mdm.ckpt")), "--mode", "p2self", "--n", "50", "--seed", seed, "--out", s(dir)]);
    }
    for f in ["samples.cmsd", "samples.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    assert_ne!(std::fs::read(a.join("samples.cmsd")).unwrap(), std::fs::read(c.join("samples.cmsd")).unwrap());
}

#[test]
fn missing_prerequisites_and_bad_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), 1);
    let out = invoke(&["train", "b", "--config", s(&cfg), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage_a.ckpt"));

    assert_eq!(code(&invoke(&["train", "a", "--config", "no-such-profile", "--out", s(tmp.path())])), 2);
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "profile = \"toy-pair\"\n[stage_a]\nlearning_rate = -1.0\n").unwrap();
    assert_eq!(code(&invoke(&["train", "a", "--config", s(&bad), "--out", s(tmp.path())])), 2);

    // MNIST without a data directory.
    let out = invoke(&["train", "a", "--config", "mnist-binary-mini", "--out", s(&tmp.path().join("m"))]);
    assert_eq!(code(&out), 3);
    assert_eq!(code(&invoke(&["report", s(&tmp.path().join("nothing"))])), 3);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), 4);
    let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
    for stage in ["a", "b"] {
        ok(&["train", stage, "--config", s(&cfg), "--out", s(&full)]);
        ok(&["train", stage, "--config", s(&cfg), "--out", s(&split), "--stop-after", "1"]);
        ok(&["train", stage, "--config", s(&cfg), "--out", s(&split), "--stop-after", "2"]);
        ok(&["train", stage, "--config", s(&cfg), "--out", s(&split)]);
    }
    let losses = |dir: &Path, stage: &str| -> Vec<f64> {
        std::fs::read_to_string(dir.join(format!("train_{stage}.jsonl")))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["total"].as_f64().unwrap())
            .collect()
    };
    for stage in ["a", "b"] {
        let (x, y) = (losses(&full, stage), losses(&split, stage));
        assert_eq!(x.len(), y.len());
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() <= 1e-6));
    }
    let digests = |dir: &Path| -> Vec<String> {
        manifest(dir)["checkpoints"].as_array().unwrap().iter().map(|c| c["digest"].as_str().unwrap().to_string()).collect()
    };
    assert_eq!(digests(&full), digests(&split));
}

#[test]
fn deterministic_manifests_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), 1);
    let (x, y) = (tmp.path().join("x"), tmp.path().join("y"));
    for dir in [&x, &y] {
        let out = bin()
            .env("COUPLING_DETERMINISTIC", "1")
            .args(["train", "a", "--config", s(&cfg), "--out", s(dir)])
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    assert_eq!(manifest(&x)["deterministic"], true);
    assert_eq!(manifest(&x)["timings"], serde_json::json!({}));
    assert_eq!(std::fs::read(x.join("manifest.json")).unwrap(), std::fs::read(y.join("manifest.json")).unwrap());
    assert_eq!(std::fs::read(x.join("stage_a.ckpt")).unwrap(), std::fs::read(y.join("stage_a.ckpt")).unwrap());
}

#[test]
fn eval_metrics() {
    let tmp = tempfile::tempdir().unwrap();

    let single = tmp.path().join("single.cmsd");
    SampleArray::new(DType::U8, vec![30, 6], vec![3.0; 180]).unwrap().write(&single).unwrap();
    let out = ok(&["eval", "--samples", s(&single), "--metrics", "entropy", "--out", s(&tmp.path().join("e.jsonl"))]);
    let rec: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rec["name"], "entropy");
    assert_eq!(rec["value"].as_f64().unwrap(), 0.0);

    let images: Vec<f64> = (0..40 * 16).map(|i| ((i * 7919) % 13 % 2) as f64).collect();
    let reference = tmp.path().join("ref.cmsd");
    SampleArray::new(DType::U8, vec![40, 4, 4], images).unwrap().write(&reference).unwrap();
    let out = ok(&[
        "eval", "--samples", s(&reference), "--reference", s(&reference), "--metrics", "fid", "--out",
        s(&tmp.path().join("f.jsonl")),
    ]);
    let rec: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(rec["value"].as_f64().unwrap() < 1e-3);
    assert!(rec["protocol_digest"].is_string());

    let missing = invoke(&["eval", "--samples", s(&tmp.path().join("nope")), "--metrics", "entropy"]);
    assert_eq!(code(&missing), 3);
    assert_eq!(code(&invoke(&["eval", "--samples", s(&single), "--metrics", "bleu"])), 2);
}

#[test]
fn sampled_and_oracle_tv_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained_run(tmp.path());
    let samples = tmp.path().join("many");
    ok(&["sample", "--checkpoint", s(&run.join("stage_b.ckpt")), "--n", "10000", "--out", s(&samples)]);
    let out = ok(&["eval", "--samples", s(&samples), "--checkpoint", s(&run.join("stage_b.ckpt")), "--metrics", "tv"]);
    let recs: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let get = |name: &str| recs.iter().find(|r| r["name"] == name).unwrap()["value"].as_f64().unwrap();
    assert!((get("tv_sampled") - get("tv_oracle")).abs() < 0.02);
    assert!(manifest(&samples)["metric_reports"].as_array().unwrap().iter().any(|r| r == "metrics.jsonl"));
}

#[test]
fn oracle_suites() {
    let out = ok(&["oracle", "pinsker", "--count", "1000", "--seed", "3"]);
    let lines = String::from_utf8(out.stdout).unwrap();
    assert!(lines.lines().count() >= 1000);
    assert!(lines.lines().all(|l| serde_json::from_str::<Value>(l).unwrap()["pass"] == true));

    ok(&["oracle", "bound", "--count", "1000", "--seed", "4"]);

    let out = ok(&["oracle", "barrier"]);
    let recs: Vec<Value> = String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let floor = recs.iter().find(|r| r["name"] == "barrier.floor").unwrap();
    assert!((floor["rhs"].as_f64().unwrap() - (2f64.sqrt() - 1.0)).abs() < 1e-3);
    assert!(recs.iter().any(|r| r["name"] == "barrier.product_witness"));
}
