use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "\
synth_train_len = 400
synth_test_len = 300
window_size = 50
steps = 20
t_infer = 5
d_model = 16
heads = 2
layers = 1
ffn = 32
batch = 8
lr = 0.01
max_epochs = 1
ae_epochs = 1
score_samples = 1
";

fn ddmt(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ddmt"));
    cmd.current_dir(dir).args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("DDMT_") {
            cmd.env_remove(k);
        }
    }
    cmd.envs(env.iter().copied());
    cmd.output().unwrap()
}

fn setup(extra: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.conf"), format!("{SMALL}{extra}")).unwrap();
    dir
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn train_then_detect_round_trip() {
    let dir = setup("");
    let out = ddmt(dir.path(), &["train", "--config", "run.conf", "--out", "o"], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("epoch"), "per-epoch losses are printed");
    let bundle = std::fs::read_to_string(dir.path().join("o/model.bundle")).unwrap();
    assert!(bundle.contains("[denoiser]"));
    assert!(bundle.contains("window_size = 50"), "bundle echoes the config");

    let out = ddmt(dir.path(), &["detect", "--config", "run.conf", "--out", "o"], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = std::fs::read_to_string(dir.path().join("o/report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "timestamp,score,raw_pred,adjusted_pred,label");
    assert_eq!(rows.len() - 1, 300, "one row per test timestamp");
    for (i, row) in rows[1..].iter().enumerate() {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 5);
        assert_eq!(fields[0], i.to_string());
    }
    let summary = std::fs::read_to_string(dir.path().join("o/summary.txt")).unwrap();
    for key in ["threshold", "precision", "recall", "f1"] {
        assert!(summary.lines().any(|l| l.starts_with(key)), "summary lacks {key}");
    }
    assert!(dir.path().join("o/timings.txt").exists());
    assert!(dir.path().join("o/config.txt").exists());
}

#[test]
fn no_ddt_bundle_has_no_denoiser() {
    let dir = setup("mode = no_ddt\n");
    let out = ddmt(dir.path(), &["train", "--config", "run.conf", "--out", "o"], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let bundle = std::fs::read_to_string(dir.path().join("o/model.bundle")).unwrap();
    assert!(bundle.contains("[autoencoder]"));
    assert!(!bundle.contains("[denoiser]"));
    let out = ddmt(dir.path(), &["detect", "--config", "run.conf", "--out", "o"], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn mode_mismatch_exits_4() {
    let dir = setup("mode = full\n");
    let out = ddmt(dir.path(), &["train", "--config", "run.conf", "--out", "o"], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = ddmt(
        dir.path(),
        &["detect", "--config", "run.conf", "--out", "o"],
        &[("DDMT_MODE", "no_ddt")],
    );
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn damaged_bundle_exits_4() {
    let dir = setup("");
    std::fs::create_dir(dir.path().join("o")).unwrap();
    std::fs::write(dir.path().join("o/model.bundle"), "DDMT-BUNDLE v99\n").unwrap();
    let out = ddmt(dir.path(), &["detect", "--config", "run.conf", "--out", "o"], &[]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let dir = setup("windw_size = 30\n");
    let out = ddmt(dir.path(), &["train", "--config", "run.conf", "--out", "o"], &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("windw_size"), "{}", stderr(&out));

    let dir = setup("");
    let out = ddmt(
        dir.path(),
        &["train", "--config", "run.conf", "--out", "o"],
        &[("DDMT_BOGUS", "1")],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).to_lowercase().contains("bogus"), "{}", stderr(&out));
}

#[test]
fn out_of_range_value_exits_2() {
    let dir = setup("rho = 2.5\n");
    let out = ddmt(dir.path(), &["train", "--config", "run.conf", "--out", "o"], &[]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn unreadable_data_exits_3() {
    let dir = setup("train_path = missing.csv\ntest_path = missing.csv\n");
    let out = ddmt(dir.path(), &["train", "--config", "run.conf", "--out", "o"], &[]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    let dir = setup("train_path = bad.csv\ntest_path = bad.csv\n");
    std::fs::write(dir.path().join("bad.csv"), "a,b\n1,x\n").unwrap();
    let out = ddmt(dir.path(), &["train", "--config", "run.conf", "--out", "o"], &[]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn synth_files_train_like_the_generator() {
    let dir = setup("");
    let out = ddmt(dir.path(), &["synth", "--config", "run.conf", "--out", "data"], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let labels = std::fs::read_to_string(dir.path().join("data/test_labels.txt")).unwrap();
    assert_eq!(labels.lines().filter(|l| !l.starts_with('#')).count(), 300);

    let from_files = "train_path = data/train.csv\ntest_path = data/test.csv\ntest_labels_path = data/test_labels.txt\n";
    std::fs::write(dir.path().join("files.conf"), format!("{SMALL}{from_files}")).unwrap();
    for (conf, out_dir) in [("run.conf", "a"), ("files.conf", "b")] {
        let out = ddmt(dir.path(), &["train", "--config", conf, "--out", out_dir], &[]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = ddmt(dir.path(), &["detect", "--config", conf, "--out", out_dir], &[]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let scores = |d: &str| -> Vec<String> {
        std::fs::read_to_string(dir.path().join(d).join("report.csv"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(str::to_owned)
            .collect()
    };
    assert_eq!(scores("a"), scores("b"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = setup("");
    for o in ["x", "y"] {
        let out = ddmt(dir.path(), &["train", "--config", "run.conf", "--seed", "7", "--out", o], &[]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = ddmt(dir.path(), &["detect", "--config", "run.conf", "--seed", "7", "--out", o], &[]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for file in ["model.bundle", "report.csv", "summary.txt", "train_log.csv"] {
        let a = std::fs::read(dir.path().join("x").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("y").join(file)).unwrap();
        assert!(a == b, "{file} differs between runs");
    }
    let seed_line = std::fs::read_to_string(dir.path().join("x/config.txt")).unwrap();
    assert!(seed_line.lines().any(|l| l == "seed = 7"));
}

#[test]
fn echo_reproduces_the_run() {
    let dir = setup("");
    let out = ddmt(dir.path(), &["train", "--config", "run.conf", "--out", "x"], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    std::fs::copy(dir.path().join("x/config.txt"), dir.path().join("echo.conf")).unwrap();
    let out = ddmt(dir.path(), &["train", "--config", "echo.conf", "--out", "y"], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        std::fs::read(dir.path().join("x/model.bundle")).unwrap(),
        std::fs::read(dir.path().join("y/model.bundle")).unwrap()
    );
}

#[test]
fn ablate_emits_four_mode_rows() {
    let dir = setup("ablation_seeds = 1, 2\nsweeps = steps\nsweep_steps = 10, 20\n");
    let out = ddmt(dir.path(), &["ablate", "--config", "run.conf", "--out", "ab"], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(dir.path().join("ab/ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 4);
    for mode in ["full", "no_adnm", "no_ddt", "transformer"] {
        assert!(rows.iter().any(|r| r.starts_with(&format!("{mode},"))), "missing {mode}");
    }
    let sweep = std::fs::read_to_string(dir.path().join("ab/sweep_steps.csv")).unwrap();
    assert_eq!(sweep.lines().filter(|l| !l.starts_with('#')).count(), 3);
}
