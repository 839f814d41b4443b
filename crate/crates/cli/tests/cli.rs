use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    Command::new(env!("CARGO_BIN_EXE_ceph-landmark"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--run-dir")
        .arg(dir)
        .output()
        .unwrap()
}

const TINY: [&str; 12] = [
    "--set",
    "synth.count=8",
    "--set",
    "global.epochs=1",
    "--set",
    "local.epochs=1",
    "--set",
    "local.samples_per_epoch=4",
    "--set",
    "crossval.folds=2",
    "--set",
    "synth.canvas=128",
];

#[test]
fn unknown_key_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["synth", "--set", "global.epochz=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn invalid_value_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["synth", "--set", "local.expand_epsilon=2.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("local"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["synth"];
    args.extend(TINY);
    assert!(run(dir.path(), &args).status.success());
    let mut args = vec!["infer"];
    args.extend(TINY);
    let out = run(dir.path(), &args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("global.ckpt"));
}

#[test]
fn crossval_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["synth", "crossval"] {
        let mut args = vec![cmd];
        args.extend(TINY);
        let out = run(dir.path(), &args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let folds = fs::read_to_string(dir.path().join("crossval/folds.csv")).unwrap();
    assert_eq!(folds.lines().count(), 9);
    let summary = fs::read_to_string(dir.path().join("crossval/summary.csv")).unwrap();
    assert!(summary.starts_with("run,mre_mm"));
    assert!(dir.path().join("manifest-crossval.json").exists());
}
