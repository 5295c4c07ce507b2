//! Drives the `sdit` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn sdit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdit")).args(args).output().expect("spawn sdit")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

#[test]
fn verify_passes_and_catches_injected_fault() {
    let ok = sdit(&["verify"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));

    let bad = sdit(&["verify", "--only", "wkv", "--inject-fault", "wkv-backward-sign"]);
    assert_eq!(bad.status.code(), Some(1));
    let out = String::from_utf8_lossy(&bad.stdout);
    assert!(out.lines().any(|l| l.starts_with("FAIL wkv")), "{out}");
}

#[test]
fn verify_only_filters_groups() {
    let o = sdit(&["verify", "--only", "lif", "--only", "skip"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8_lossy(&o.stdout);
    let groups: Vec<&str> = out.lines().filter_map(|l| l.split_whitespace().nth(1)).collect();
    assert!(groups.iter().any(|g| *g == "lif") && groups.iter().any(|g| *g == "skip"));
    assert!(!groups.iter().any(|g| *g == "wkv" || *g == "ops"));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.idx");
    let o = sdit(&["train", "--idx-images", p(&missing), "--out", p(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.idx"), "{}", stderr(&o));

    let o = sdit(&["train", "--out", p(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--toy") && stderr(&o).contains("--idx-images"));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "hidden_dim = 16\nhiden_dim = 8\n").unwrap();
    let o = sdit(&["train", "--config", p(&cfg), "--toy", "bars"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hiden_dim"));

    let o = sdit(&["train", "--toy", "bars", "--set", "patch_size=3"]);
    assert_eq!(o.status.code(), Some(2));
    let o = sdit(&["sample", "--ckpt", p(&missing), "--n", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = sdit(&["sample", "--ckpt", p(&missing)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numeric_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdit(&["train", "--toy", "bars", "--steps", "50", "--lr", "1e30", "--samples", "0", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("step "), "{}", stderr(&o));
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = sdit(&["train", "--toy", "blobs", "--steps", "6", "--samples", "2", "--seed", "4", "--out", p(&a)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let echo = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(echo, std::fs::read_to_string(a.join("config.txt")).unwrap());

    let o = sdit(&["train", "--config", p(&a.join("config.txt")), "--out", p(&b)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["config.txt", "loss.csv", "checkpoints/final.ckpt", "samples/final.pgm"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rows = std::fs::read_to_string(a.join("loss.csv")).unwrap().lines().count();
    assert_eq!(rows, 7);
}

#[test]
fn sampling_is_seeded_and_ablation_changes_training() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--toy", "bars", "--steps", "4", "--samples", "0", "--out", p(&out)];
        args.extend_from_slice(extra);
        let o = sdit(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let full_dir = run("full", &[]);
    let ablated_dir = run("ablated", &["--no-recon-module"]);
    let losses = |d: &Path| std::fs::read_to_string(d.join("loss.csv")).unwrap();
    assert_ne!(losses(&full_dir), losses(&ablated_dir));
    let full = full_dir.join("checkpoints/final.ckpt");
    let draw = |ckpt: &Path, seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = sdit(&["sample", "--ckpt", p(ckpt), "--n", "3", "--seed", seed, "--stride", "10", "--out", p(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        std::fs::read(out.join("samples.tensor")).unwrap()
    };
    let x1 = draw(&full, "5", "s1");
    let x2 = draw(&full, "5", "s2");
    let x3 = draw(&full, "6", "s3");
    assert_eq!(x1, x2);
    assert_ne!(x1, x3);
}

#[test]
fn count_prints_reference_and_csv() {
    let o = sdit(&["count", "--preset", "mnist"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("11.67") && out.contains("1.32"));

    let o = sdit(&["count", "--csv"]);
    let out = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
}

#[test]
fn precision_f64_trains_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdit(&["train", "--toy", "bars", "--steps", "2", "--samples", "1", "--precision", "f64", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = sdit(&["sample", "--ckpt", p(&dir.path().join("checkpoints/final.ckpt")), "--n", "1", "--stride", "25", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}
