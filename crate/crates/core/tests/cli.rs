//! The `aplnet` binary end to end: each verb on a tiny dataset, and the
//! exit status for configuration and runtime failures.

use std::path::Path;
use std::process::{Command, Output};

fn aplnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aplnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write_blobs(dir: &Path) {
    let mut train = String::from("f0,f1,label\n");
    let mut test = train.clone();
    for i in 0..80 {
        let c = i % 2;
        let x = if c == 0 { 1.0 } else { -1.0 } + 0.01 * (i % 7) as f64;
        let row = format!("{x},{},{c}\n", 0.02 * (i % 5) as f64);
        if i < 60 {
            train.push_str(&row);
        } else {
            test.push_str(&row);
        }
    }
    std::fs::write(dir.join("train.csv"), train).unwrap();
    std::fs::write(dir.join("test.csv"), test).unwrap();
    std::fs::write(dir.join("blobs.manifest"), "train_csv = train.csv\ntest_csv = test.csv\n").unwrap();
    std::fs::write(
        dir.join("base.cfg"),
        "data = blobs.manifest\nhidden = 4\nbatch_size = 10\nepochs = 2\nworkers = 1\n",
    )
    .unwrap();
    std::fs::write(dir.join("run.cfg"), "include = base.cfg\nhinges = 2\noutput = out\n").unwrap();
}

#[test]
fn verbs_succeed_and_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_blobs(d);

    let out = aplnet(&["train", "--config", "run.cfg", "--repetitions", "2"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("runs: 2"));
    assert!(d.join("out/run-1.ckpt").exists());

    let out = aplnet(&["eval", "--checkpoint", "out/run-0.ckpt", "--data", "blobs.manifest"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("loss "));

    let out = aplnet(&["sweep-s", "--config", "run.cfg", "--s", "0,1", "--output", "sweep"], d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);

    let out = aplnet(
        &["export-activations", "--checkpoint", "out/run-0.ckpt", "--x-min", "-2", "--points", "5", "--out", "ex"],
        d,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(d.join("ex/activations-layer1.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 5 + 2);
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_blobs(d);
    let out = aplnet(&["train", "--config", "run.cfg", "--set", "lr=-1", "--set", "colour=red"], d);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lr") && err.contains("colour"), "{err}");

    assert_eq!(aplnet(&["train", "--config", "missing.cfg"], d).status.code(), Some(2));
    assert_eq!(aplnet(&["frobnicate"], d).status.code(), Some(2));

    let out = aplnet(&["train", "--config", "run.cfg"], d);
    assert_eq!(out.status.code(), Some(0));
    let out = aplnet(&["export-activations", "--checkpoint", "out/run-0.ckpt", "--layers", "7"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_blobs(d);
    std::fs::write(d.join("junk.ckpt"), b"not an archive").unwrap();
    let out = aplnet(&["eval", "--checkpoint", "junk.ckpt", "--data", "blobs.manifest"], d);
    assert_eq!(out.status.code(), Some(3));

    let out = aplnet(&["train", "--config", "run.cfg", "--set", "lr=1e6", "--epochs", "5"], d);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    assert!(d.join("out/run-0.last-finite.ckpt").exists());
}
