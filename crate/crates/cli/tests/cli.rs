use std::path::Path;
use std::process::{Command, Output};

fn snnergy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snnergy")).args(args).output().unwrap()
}

fn digest(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .find_map(|l| l.strip_prefix("digest ").map(str::to_string))
        .expect("digest line")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let small = ["--samples-per-class", "5", "--size", "16", "--seed", "3"];
    let first = snnergy(&[&["gen-data", "--out", p(&a)][..], &small].concat());
    let second = snnergy(&[&["gen-data", "--out", p(&b)][..], &small].concat());
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(digest(&first), digest(&second));
    let other = snnergy(&["gen-data", "--out", p(&dir.path().join("c")), "--samples-per-class", "5", "--size", "16", "--seed", "4"]);
    assert_ne!(digest(&first), digest(&other));
}

#[test]
fn bench_prints_one_row_per_kind_and_size() {
    let out = snnergy(&["bench", "--kind", "both", "--n", "16,64,256", "--channels", "16", "--repeats", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("kind,N,C,ops,wall_ns_median,peak_bytes"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("cmqka,16,16,"));
    assert!(rows[5].starts_with("ssa,256,16,"));
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    assert_eq!(snnergy(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(snnergy(&["bench", "--n", "64,16,256"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let out = snnergy(&["profile", "--preset", "paper-table", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
    assert_eq!(snnergy(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = snnergy(&["eval", "--checkpoint", p(&dir.path().join("missing.snck")), "--data", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.snck");
    let metrics = dir.path().join("metrics.csv");
    assert!(snnergy(&["gen-data", "--out", p(&data), "--samples-per-class", "6", "--size", "16"]).status.success());
    let out = snnergy(&["train", "--data", p(&data), "--out", p(&ckpt), "--metrics", p(&metrics), "--epochs", "2", "--batch-size", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    let out = snnergy(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "val"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("top1"));
}
