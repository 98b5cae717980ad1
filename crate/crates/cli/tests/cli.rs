use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TOY_CFG: &str = "\
# small network for quick runs
feature_net = shortened
epochs = 2
batch_size = 16
lr = 0.01
context = 1
cheb_k = 2
cheb_filters = 6
time_filters = 6
folds = 3
";

fn mstgcn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mstgcn")).current_dir(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = mstgcn(dir, args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Temp dir holding a 3-subject short-epoch dataset and `toy.cfg`.
fn toy() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth-data", "--subjects", "3", "--epochs", "24", "--samples", "300", "-o", "toy.mstg"]);
    fs::write(dir.path().join("toy.cfg"), TOY_CFG).unwrap();
    dir
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn train_run_directory_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-data", "--subjects", "5", "--epochs", "40", "--seed", "7", "-o", "toy.mstg"]);
    fs::write(d.join("base.cfg"), "epochs = 1\nbatch_size = 40\n").unwrap();
    ok(d, &["train", "--data", "toy.mstg", "--config", "base.cfg", "-o", "run1/"]);
    for f in ["history.csv", "metrics.csv", "model.ckpt", "effective.cfg", "confusion.csv"] {
        assert!(d.join("run1").join(f).is_file(), "missing {f}");
    }
    let history = read_csv(&d.join("run1/history.csv"));
    assert_eq!(history.len(), 2);
    assert_eq!(history[0][0], "epoch");
    let cfg = fs::read_to_string(d.join("run1/effective.cfg")).unwrap();
    assert!(cfg.contains("epochs = 1\n") && cfg.contains("batch_size = 40\n"));
}

#[test]
fn effective_config_reproduces_history() {
    let dir = toy();
    let d = dir.path();
    ok(d, &["train", "--data", "toy.mstg", "--config", "toy.cfg", "--seed", "5", "-o", "a"]);
    ok(d, &["train", "--data", "toy.mstg", "--config", "a/effective.cfg", "-o", "b"]);
    assert_eq!(fs::read(d.join("a/history.csv")).unwrap(), fs::read(d.join("b/history.csv")).unwrap());
    assert_eq!(fs::read(d.join("a/model.ckpt")).unwrap(), fs::read(d.join("b/model.ckpt")).unwrap());
}

#[test]
fn evaluation_defaults_to_held_out_subjects() {
    let dir = toy();
    let d = dir.path();
    ok(d, &["train", "--data", "toy.mstg", "--config", "toy.cfg", "--set", "validation_subjects=1", "-o", "run"]);
    let out = ok(d, &["eval", "--model", "run/model.ckpt", "--data", "toy.mstg", "-o", "ev"]);
    assert!(out.starts_with("subjects 1:"), "{out}");
    // evaluating the same subject reproduces the training run's validation metrics
    let train_m = read_csv(&d.join("run/metrics.csv"));
    let eval_m = read_csv(&d.join("ev/metrics.csv"));
    assert_eq!(train_m[1][1..], eval_m[1][1..]);
    let all = ok(d, &["eval", "--model", "run/model.ckpt", "--data", "toy.mstg", "--subjects", "0,1,2"]);
    assert!(all.contains("over 72 windows"), "{all}");
}

#[test]
fn attention_export_is_row_stochastic() {
    let dir = toy();
    let d = dir.path();
    ok(d, &["train", "--data", "toy.mstg", "--config", "toy.cfg", "-o", "run"]);
    ok(d, &["export-attention", "--model", "run/model.ckpt", "--data", "toy.mstg", "-o", "att"]);
    let temporal = read_csv(&d.join("att/temporal.csv"));
    assert_eq!(temporal.len(), 1 + 3, "header plus 2d+1 rows");
    assert_eq!(temporal[0], ["offset", "to_-1", "to_+0", "to_+1"]);
    for row in &temporal[1..] {
        let s: f64 = row[1..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9, "{row:?}");
    }
    let spatial = read_csv(&d.join("att/spatial.csv"));
    assert_eq!(spatial[0], ["stage", "windows", "C3", "C4", "F3"]);
    let stages: Vec<&str> = spatial[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(stages, ["Wake", "N1", "N2", "N3", "REM"]);
    let by_stage = read_csv(&d.join("att/temporal_by_stage.csv"));
    assert_eq!(by_stage.len(), 1 + 5 * 3);
}

#[test]
fn adjacency_export_writes_one_matrix_per_stage() {
    let dir = toy();
    let d = dir.path();
    ok(d, &["train", "--data", "toy.mstg", "--config", "toy.cfg", "-o", "run"]);
    ok(d, &["export-adjacency", "--model", "run/model.ckpt", "--data", "toy.mstg", "-o", "adj"]);
    let summary = read_csv(&d.join("adj/adjacency_summary.csv"));
    assert_eq!(summary.len(), 6);
    for row in &summary[1..] {
        let m = read_csv(&d.join("adj").join(&row[1]));
        assert_eq!(m.len(), 4);
        assert_eq!(m[0], ["channel", "C3", "C4", "F3"]);
        if row[2] != "0" {
            for r in &m[1..] {
                let s: f64 = r[1..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    ok(d, &["train", "--data", "toy.mstg", "--config", "toy.cfg", "--set", "fc_source=pcc", "-o", "fixed"]);
    let o = mstgcn(d, &["export-adjacency", "--model", "fixed/model.ckpt", "--data", "toy.mstg", "-o", "adj2"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn cross_validation_writes_fold_outputs() {
    let dir = toy();
    let d = dir.path();
    ok(d, &["cross-validate", "--data", "toy.mstg", "--config", "toy.cfg", "--epochs", "1", "--jobs", "2", "-o", "cv"]);
    let metrics = read_csv(&d.join("cv/metrics.csv"));
    let scopes: Vec<&str> = metrics[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(scopes, ["fold0", "fold1", "fold2", "pooled", "mean", "std"]);
    assert_eq!(metrics[4][1], "72");
    let history = read_csv(&d.join("cv/history.csv"));
    assert_eq!(history[0][0], "fold");
    assert_eq!(history.len(), 1 + 3);
    for k in 0..3 {
        let ckpt = format!("cv/fold{k}.ckpt");
        let out = ok(d, &["eval", "--model", &ckpt, "--data", "toy.mstg"]);
        assert!(out.contains("over 24 windows"), "{out}");
    }
}

#[test]
fn sweep_table_is_ordered_and_repeatable() {
    let dir = toy();
    let d = dir.path();
    let args = |out: &'static str, jobs: &'static str| {
        vec![
            "sweep", "--data", "toy.mstg", "--config", "toy.cfg", "--set", "epochs=1", "--layers", "1,2", "--fc-source",
            "learned,full", "--test-subjects", "2", "--jobs", jobs, "-o", out,
        ]
    };
    ok(d, &args("s1", "1"));
    ok(d, &args("s2", "2"));
    let table = read_csv(&d.join("s1/results.csv"));
    assert_eq!(table.len(), 5);
    let points: Vec<(&str, &str)> = table[1..].iter().map(|r| (r[1].as_str(), r[5].as_str())).collect();
    assert_eq!(points, [("1", "learned"), ("1", "full"), ("2", "learned"), ("2", "full")]);
    assert!(table[1..].iter().all(|r| r.last().unwrap() == "ok"));
    assert_eq!(fs::read(d.join("s1/results.csv")).unwrap(), fs::read(d.join("s2/results.csv")).unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = toy();
    let d = dir.path();
    let base = ["train", "--data", "toy.mstg", "--config", "toy.cfg", "-o", "x"];
    let with = |extra: &[&'static str]| {
        let mut v = base.to_vec();
        v.extend_from_slice(extra);
        code(&mstgcn(d, &v))
    };
    assert_eq!(with(&["--set", "learning_rate=0.1"]), 1);
    assert_eq!(with(&["--set", "fc_source=random"]), 1);
    assert_eq!(with(&["--bogus-flag"]), 1);
    fs::write(d.join("bad.cfg"), "epochs = 2\nthis line has no separator\n").unwrap();
    let o = mstgcn(d, &["train", "--data", "toy.mstg", "--config", "bad.cfg", "-o", "x"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    assert_eq!(code(&mstgcn(d, &["no-such-command"])), 1);
    assert_eq!(code(&mstgcn(d, &["--help"])), 0);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = toy();
    let d = dir.path();
    assert_eq!(code(&mstgcn(d, &["train", "--data", "missing.mstg", "-o", "x"])), 2);
    let mut bytes = fs::read(d.join("toy.mstg")).unwrap();
    bytes[40] ^= 0xff;
    fs::write(d.join("corrupt.mstg"), bytes).unwrap();
    let o = mstgcn(d, &["train", "--data", "corrupt.mstg", "--config", "toy.cfg", "-o", "x"]);
    assert_eq!(code(&o), 2);
    // standard network expects 3000-sample epochs
    assert_eq!(code(&mstgcn(d, &["train", "--data", "toy.mstg", "-o", "x"])), 2);
}

#[test]
fn divergence_exits_with_three_and_keeps_last_good_parameters() {
    let dir = toy();
    let d = dir.path();
    let o = mstgcn(
        d,
        &["train", "--data", "toy.mstg", "--config", "toy.cfg", "--set", "lr=1e300", "--set", "optimizer=sgd", "-o", "div"],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("div/model.ckpt").is_file());
    ok(d, &["eval", "--model", "div/model.ckpt", "--data", "toy.mstg"]);
}

#[test]
fn self_check_reports_every_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["self-check"]);
    let passed = out.lines().filter(|l| l.starts_with("PASS ")).count();
    assert_eq!(passed, 8, "{out}");
    assert!(!out.contains("FAIL"));
}
