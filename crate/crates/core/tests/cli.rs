use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn splitvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitvae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &str = r#"{
  "synth": {"n_frequency_bins": 4},
  "model": {"d_private": 2, "d_shared": 2, "channels": [2, 4, 4, 4]},
  "training": {"epochs": 1, "batch_size": 32},
  "evaluation": {"probe_steps": 20}
}"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&splitvae(&[])), 1);
    assert_eq!(code(&splitvae(&["synth", "--n", "ten", "--out", "x"])), 1);
    assert_eq!(code(&splitvae(&["--help"])), 0);
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"training": {"epochs": 1, "learning_rate": 0.1}}"#,
    );
    let out = splitvae(&[
        "train",
        "--config",
        &cfg,
        "--out",
        &dir.path().join("run").to_string_lossy(),
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

#[test]
fn invalid_config_value_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"training": {"batch_size": 0}}"#);
    let out = splitvae(&[
        "train",
        "--config",
        &cfg,
        "--out",
        &dir.path().join("run").to_string_lossy(),
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_string_lossy();
    let out = splitvae(&[
        "eval-mi",
        "--ckpt",
        &format!("{d}/none.ckpt"),
        "--data",
        &d,
        "--out",
        &d,
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn synth_train_and_evaluate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let cfg = write(dir.path(), "tiny.json", TINY);

    let out = splitvae(&[
        "synth",
        "--n",
        "400",
        "--seed",
        "3",
        "--out",
        &p("data"),
        "--config",
        &cfg,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["manifest.json", "spectrograms.f32", "resolved_config.json"] {
        assert!(dir.path().join("data").join(f).is_file(), "{f}");
    }

    let out = splitvae(&[
        "train",
        "--config",
        &cfg,
        "--data",
        &p("data"),
        "--out",
        &p("run"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = p("run/checkpoint_final.ckpt");
    let log = fs::read_to_string(p("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "{log}");

    let snapshot = p("run/resolved_config.json");
    let out = splitvae(&[
        "train",
        "--config",
        &snapshot,
        "--data",
        &p("data"),
        "--out",
        &p("rerun"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in [
        "train_log.csv",
        "checkpoint_final.ckpt",
        "resolved_config.json",
    ] {
        let a = fs::read(dir.path().join("run").join(f)).unwrap();
        let b = fs::read(dir.path().join("rerun").join(f)).unwrap();
        assert!(a == b, "{f} differs when rerun from the snapshot");
    }

    let out = splitvae(&[
        "eval-mi",
        "--ckpt",
        &ckpt,
        "--data",
        &p("data"),
        "--out",
        &p("eval"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mi = fs::read_to_string(p("eval/mi_matrix.csv")).unwrap();
    assert_eq!(mi.lines().next(), Some("dimension,timbre,frequency"));
    assert_eq!(mi.lines().count(), 1 + 4);
    assert!(dir.path().join("eval/mi_heatmap.pgm").is_file());

    let out = splitvae(&[
        "eval-probe",
        "--ckpt",
        &ckpt,
        "--data",
        &p("data"),
        "--subspace",
        "all",
        "--task",
        "all",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 6, "{stdout}");
    for line in stdout.lines() {
        let acc: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&acc), "{line}");
    }

    let out = splitvae(&[
        "eval-probe",
        "--ckpt",
        &ckpt,
        "--data",
        &p("data"),
        "--subspace",
        "middle",
        "--task",
        "timbre",
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}
