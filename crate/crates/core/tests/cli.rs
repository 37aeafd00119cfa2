//! The command-line binary: exit codes, a tiny end-to-end run and the
//! oracle printouts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
planted_train_per_class=6
planted_test_per_class=2
teacher_epochs=2
early_epoch=1
ipc=1
kernel_budget=256
student_epochs=1
eval_seeds=1
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchdistill")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["gen-data"])), 1, "missing --out");
    assert_eq!(code(&run(&["oracle", "shapley"])), 1, "missing --d");
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["train-teacher", "--data", s(&missing), "--out", s(&out)])), 2);
    let bad_config = dir.path().join("bad.txt");
    fs::write(&bad_config, "bogus_key=1\n").unwrap();
    assert_eq!(code(&run(&["gen-data", "--config", s(&bad_config), "--out", s(&out)])), 2);
    fs::create_dir_all(&missing).unwrap();
    fs::write(missing.join("train-images.idx"), [0u8; 16]).unwrap();
    fs::write(missing.join("train-labels.idx"), [0u8; 8]).unwrap();
    let o = run(&["train-teacher", "--data", s(&missing), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("offset"));
}

#[test]
fn numeric_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.txt");
    fs::write(&config, format!("{TINY}teacher_eta=1e300\n")).unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&run(&["gen-data", "--config", s(&config), "--out", s(&data)])), 0);
    let o = run(&["train-teacher", "--config", s(&config), "--data", s(&data), "--out", s(&dir.path().join("t"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn tiny_end_to_end_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    fs::write(p("c.txt"), TINY).unwrap();
    let cfg = p("c.txt");
    let ok = |args: &[&str]| {
        let mut full = vec!["--config", s(&cfg), "--seed", "7"];
        full.extend_from_slice(args);
        let o = run(&full);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    ok(&["gen-data", "--out", s(&p("data"))]);
    for f in ["train-images.idx", "train-labels.idx", "test-images.idx", "test-labels.idx", "train-boxes.tsv"] {
        assert!(p("data").join(f).exists(), "{f}");
    }
    ok(&["train-teacher", "--data", s(&p("data")), "--out", s(&p("teacher"))]);
    ok(&["attribute", "--data", s(&p("data")), "--teacher", s(&p("teacher")), "--limit", "2", "--out", s(&p("attr"))]);
    assert!(p("attr").join("0.pgm").exists() && p("attr").join("1.txt").exists());
    ok(&["distill", "--data", s(&p("data")), "--teacher", s(&p("teacher")), "--out", s(&p("d1"))]);
    ok(&["distill", "--data", s(&p("data")), "--teacher", s(&p("teacher")), "--out", s(&p("d2"))]);
    for f in ["manifest.tsv", "config.txt", "images/0/0.ppm", "labels/9/0.bin"] {
        assert_eq!(fs::read(p("d1").join(f)).unwrap(), fs::read(p("d2").join(f)).unwrap(), "{f}");
    }
    let manifest = fs::read_to_string(p("d1").join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 10 * 4);
    let o = ok(&["eval", "--distilled", s(&p("d1")), "--data", s(&p("data")), "--out", s(&p("eval"))]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean"));
    ok(&["score", "--data", s(&p("data")), "--teacher", s(&p("teacher")), "--utility", "5", "--out", s(&p("score"))]);
    let csv = fs::read_to_string(p("score").join("scores.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "sample_id,class,gradnorm,loss,exact_utility,bound");
    assert_eq!(rows.len(), 1 + 60);
    for row in &rows[1..6] {
        let f: Vec<&str> = row.split(',').collect();
        let (u, b): (f64, f64) = (f[4].parse().unwrap(), f[5].parse().unwrap());
        assert!(u <= b + 1e-9);
    }
    assert!(rows[6].ends_with(",,"));
}

#[test]
fn oracle_printouts() {
    let o = run(&["oracle", "shapley", "--d", "8", "--seed", "3"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("player\texact\tkernel_full\tkernel_64"));
    for line in text.lines().skip(1).take(8) {
        let f: Vec<f64> = line.split('\t').skip(1).take(2).map(|v| v.parse().unwrap()).collect();
        assert!((f[0] - f[1]).abs() < 1e-6, "{line}");
    }
    let o = run(&["oracle", "utility", "--n", "12"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + 12 + 1);
    assert_eq!(text.lines().last(), Some("violations\t0"));
    assert!(run(&["oracle", "shapley", "--d", "30"]).status.code() != Some(0));
}
