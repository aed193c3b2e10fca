//! End-to-end runs of the `a2c2` binary on tiny configurations.

use std::path::Path;
use std::process::{Command, Output};

use a2c2::pipeline::{sha256_file, Manifest};

fn a2c2(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_a2c2"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn a2c2")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = a2c2(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = a2c2(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "error should be one line: {err}");
    assert!(err.starts_with("error: "), "{err}");
    err
}

const TINY: &[&str] = &[
    "--set",
    "episodes=30",
    "--set",
    "base.hidden=16",
    "--set",
    "base.epochs=2",
    "--set",
    "base.warmup=5",
    "--set",
    "head.hidden=8",
    "--set",
    "head.epochs=1",
    "--set",
    "head.warmup=5",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

#[test]
fn print_config_shows_head_training_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["train-correction", "--data", "x", "--out", "y", "--print-config"]);
    for want in [
        "head.lr = 1e-4",
        "head.weight_decay = 1e-3",
        "head.grad_clip = 5",
        "head.warmup = 500",
        "head.batch = 512",
        "head.epochs = 16",
    ] {
        let line = out.lines().find(|l| l.starts_with(want)).unwrap_or_else(|| panic!("missing {want}:\n{out}"));
        assert!(line.contains("# default from the Kinetix correction-head training table"), "{line}");
    }
}

#[test]
fn config_file_and_flags_merge() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "# tiny\nseed = 4\nhead.epochs = 3\n").unwrap();
    let out = ok(dir.path(), &["--config", "run.cfg", "--seed", "8", "gradcheck", "--print-config"]);
    assert!(out.contains("seed = 8  # from command line"));
    assert!(out.contains("head.epochs = 3  # from config file"));
    std::fs::write(dir.path().join("bad.cfg"), "head.epoch = 3\n").unwrap();
    let err = fails(dir.path(), &["--config", "bad.cfg", "gradcheck"]);
    assert!(err.contains("unknown key 'head.epoch'"), "{err}");
}

#[test]
fn staged_pipeline_writes_reproducible_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with_tiny(&["gen-expert", "--out", "dbase.bin"]));
    ok(d, &with_tiny(&["train-base", "--data", "dbase.bin", "--out", "base.pol"]));
    ok(d, &with_tiny(&["infer-augment", "--data", "dbase.bin", "--base", "base.pol", "--out", "dcor.bin"]));
    ok(d, &with_tiny(&["train-correction", "--data", "dcor.bin", "--out", "head.pol"]));
    let out = ok(
        d,
        &with_tiny(&[
            "sweep", "--base", "base.pol", "--head", "head.pol", "--out", "sweep.csv", "--set", "sweep.rollouts=4", "--set", "sweep.cells=0:1,2:3",
        ]),
    );
    assert!(out.contains("a2c2"), "{out}");
    let csv = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let m = Manifest::read(&d.join("head.pol.manifest")).unwrap();
    assert_eq!(m.get("command"), Some("train-correction"));
    assert_eq!(m.get("input.data.sha256").unwrap(), sha256_file(&d.join("dcor.bin")).unwrap());
    assert_eq!(m.get("output.main.sha256").unwrap(), sha256_file(&d.join("head.pol")).unwrap());

    // Re-running a stage from its manifest's config reproduces the artifact.
    let cfg = Manifest::read(&d.join("base.pol.manifest")).unwrap().config().unwrap();
    std::fs::write(d.join("replay.cfg"), cfg.render()).unwrap();
    ok(d, &["--config", "replay.cfg", "train-base", "--data", "dbase.bin", "--out", "again.pol"]);
    assert_eq!(sha256_file(&d.join("again.pol")).unwrap(), sha256_file(&d.join("base.pol")).unwrap());

    let out = ok(d, &["rollout", "--base", "base.pol", "--head", "head.pol", "--delay", "2", "--exec", "3", "--trace", "t.csv"]);
    assert!(out.starts_with("success="), "{out}");
    ok(d, &["export-csv", "--input", "dcor.bin", "--out", "dcor.csv"]);

    // Ordering checks.
    let err = fails(d, &["train-correction", "--data", "dbase.bin", "--out", "h2.pol"]);
    assert!(err.contains("run infer-augment first"), "{err}");
    ok(d, &with_tiny(&["gen-expert", "--task", "holdzone", "--out", "hz.bin"]));
    let err = fails(d, &with_tiny(&["infer-augment", "--data", "hz.bin", "--base", "base.pol", "--out", "x.bin"]));
    assert!(err.contains("infer-augment"), "{err}");
    let err = fails(d, &["rollout", "--base", "base.pol", "--delay", "4", "--exec", "3"]);
    assert!(err.contains("waiting gap"), "{err}");
}

#[test]
fn gradcheck_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--specs", "4", "--trials", "1"]);
    assert!(out.trim_end().ends_with("PASS"), "{out}");
}

#[test]
fn missing_flags_print_usage_and_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = a2c2(dir.path(), &["train-base"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let err = fails(dir.path(), &["export-csv", "--input", "missing.bin", "--out", "x.csv"]);
    assert!(err.contains("missing.bin"), "{err}");
}
