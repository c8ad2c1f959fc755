//! Every subcommand on a tiny generated world.

use std::path::Path;
use std::process::Command;

fn bam(args: &[&str], cwd: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_bam")).args(args).current_dir(cwd).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "bam {args:?} failed\nstdout:\n{stdout}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    bam(
        &["synth-data", "--out", "w", "--images", "24", "--val-images", "12", "--size", "32"],
        d,
    );
    assert!(d.join("w/train/folds.json").exists());

    let quick_pre = ["--set", "pretrain.batch_size=8"];
    let mut args = vec!["pretrain-base", "--data", "w/train", "--out", "s1.ckpt", "--epochs", "1"];
    args.extend(quick_pre);
    bam(&args, d);

    let quick_meta = ["--set", "meta.episodes_per_epoch=8", "--set", "meta.calibration_pairs=4"];
    let mut args = vec!["meta-train", "--data", "w/train", "--stage1", "s1.ckpt", "--out", "bam.ckpt", "--epochs", "1"];
    args.extend(quick_meta);
    let out = bam(&args, d);
    assert!(out.contains("frozen encoder/base unchanged: true"), "{out}");

    let out = bam(
        &[
            "evaluate", "--data", "w/val", "--ckpt", "bam.ckpt", "--episodes", "6", "--seeds", "0,1", "--results", "r.json",
            "--label", "bam",
        ],
        d,
    );
    assert!(out.contains("mIoU"), "{out}");
    let results: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert!(results.is_object());

    bam(&["evaluate", "--data", "w/val", "--ckpt", "bam.ckpt", "--episodes", "4", "--learner", "base-only"], d);

    bam(
        &[
            "evaluate-generalized", "--data", "w/val", "--ckpt", "bam.ckpt", "--episodes", "4", "--seeds", "0", "--sweep",
            "0.5,0.9", "--plot", "sweep.svg", "--dump", "dump.json",
        ],
        d,
    );
    let svg = std::fs::read_to_string(d.join("sweep.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    bam(&["evaluate-generalized", "--from-dumps", "dump.json", "--scheme", "alt"], d);

    let out = bam(&["flops", "--channels", "512", "--height", "60", "--width", "60"], d);
    assert!(out.contains("3.78G"), "{out}");
    bam(&["flops", "--image-size", "32"], d);
}

#[test]
fn bad_override_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bam"))
        .args(["flops", "--set", "no_equals_sign"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("key=value"));
}
