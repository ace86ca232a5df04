//! End-to-end checks of the `mdta2g` binary: exit codes, seeding, settings
//! precedence and checkpoint resumption.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdta2g"))
        .args(args)
        .current_dir(dir)
        .env_remove("MDTA2G_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn gen_data(dir: &Path) {
    ok(dir, &["gen-data", "--out", "data", "--n", "3", "--frames", "24", "--seed", "3"]);
}

fn last_logged_step(csv: &Path) -> u64 {
    let text = fs::read_to_string(csv).unwrap();
    text.lines().last().unwrap().split(',').next().unwrap().parse().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
    let out = run(dir.path(), &["gen-data", "--out", "d", "--set", "bogus_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train", "--data", "missing", "--out", "m.safetensors", "--steps", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_variable_matches_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--out", "flag", "--n", "2", "--frames", "16", "--seed", "11"]);
    let env = Command::new(env!("CARGO_BIN_EXE_mdta2g"))
        .args(["gen-data", "--out", "env", "--n", "2", "--frames", "16"])
        .current_dir(dir.path())
        .env("MDTA2G_SEED", "11")
        .status()
        .unwrap();
    assert!(env.success());
    ok(dir.path(), &["gen-data", "--out", "other", "--n", "2", "--frames", "16", "--seed", "12"]);
    let read = |d: &str| fs::read(dir.path().join(d).join("seq_0000.gesture")).unwrap();
    assert_eq!(read("flag"), read("env"));
    assert_ne!(read("flag"), read("other"));
}

#[test]
fn flags_override_config_file_and_set_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path());
    fs::write(dir.path().join("run.cfg"), "# desk run\nsteps = 4\nlog_every = 2\nbatch_size = 2\nframes = 8\n").unwrap();
    let train = |name: &str, extra: &[&str]| {
        let ckpt = format!("{name}.safetensors");
        let mut args = vec!["train", "--config", "run.cfg", "--data", "data", "--out", ckpt.as_str()];
        args.extend(extra);
        ok(dir.path(), &args);
        last_logged_step(&dir.path().join(format!("{name}.loss.csv")))
    };
    assert_eq!(train("file", &[]), 4);
    assert_eq!(train("flag", &["--steps", "6"]), 6);
    assert_eq!(train("set", &["--steps", "6", "--set", "steps=8"]), 8);
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path());
    let common = ["--data", "data", "--batch-size", "2", "--frames", "8", "--seed", "5"];
    let train = |out: &str, steps: &str, resume: Option<&str>| {
        let mut args = vec!["train", "--out", out, "--steps", steps];
        args.extend(common);
        if let Some(r) = resume {
            args.extend(["--resume", r]);
        }
        ok(dir.path(), &args);
    };
    train("half.safetensors", "6", None);
    train("resumed.safetensors", "12", Some("half.safetensors"));
    train("straight.safetensors", "12", None);
    let read = |f: &str| fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("resumed.safetensors"), read("straight.safetensors"));
}

#[test]
fn pipeline_produces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--out", "data", "--n", "4", "--frames", "40", "--seed", "2"]);
    ok(d, &["train", "--data", "data", "--out", "m.safetensors", "--steps", "10", "--batch-size", "4", "--frames", "24"]);
    ok(d, &["sample", "--checkpoint", "m.safetensors", "--data", "data", "--out", "gen", "--N", "25"]);
    ok(d, &[
        "eval", "--truth", "data", "--generated", "gen", "--out", "metrics.csv", "--set", "extractor_steps=50", "--set",
        "extractor_window=20", "--set", "extractor_stride=1",
    ]);
    let csv = fs::read_to_string(d.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    for metric in ["fgd", "diversity", "srgr", "beat_align"] {
        let i = header.iter().position(|h| *h == metric).unwrap();
        assert!(row[i].parse::<f64>().unwrap().is_finite(), "{metric}");
    }
}
