//! The `flcleaner` binary: subcommands, output files and exit codes.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{tiny_config, write_banded_mnist};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flcleaner"));
    cmd.env_remove("FLCLEANER_THREADS");
    cmd
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Synthetic IDX files plus a tiny config pointing at them.
fn setup(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    write_banded_mnist(&data, 600, 200);
    let mut cfg = tiny_config();
    cfg.data_dir = data;
    cfg.rounds = 2;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn run_into(cfg: &Path, out: &Path, threads: Option<&str>) -> Output {
    let mut cmd = bin();
    if let Some(t) = threads {
        cmd.env("FLCLEANER_THREADS", t);
    }
    cmd.args(["run", "--config"]).arg(cfg).arg("--out").arg(out).output().unwrap()
}

#[test]
fn run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = dir.path().join("out");
    let res = run_into(&cfg, &out, None);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["rounds.csv", "summary.json", "rounds.jsonl"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("rounds.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "round,acc,recall,fpr,asr,delta,blocked_ids");
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run_into(&cfg, &a, Some("1"))), 0);
    assert_eq!(code(&run_into(&cfg, &b, Some("4"))), 0);
    let read = |d: &Path| std::fs::read(d.join("rounds.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn invalid_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let res = run_into(&cfg, &dir.path().join("out"), Some("many"));
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("FLCLEANER_THREADS"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, "rounds = 3\nbogus_key = 1\n").unwrap();
    assert_eq!(code(&run_into(&unknown, &out, None)), 2);

    let invalid = dir.path().join("invalid.toml");
    std::fs::write(&invalid, "num_clients = 0\n").unwrap();
    assert_eq!(code(&run_into(&invalid, &out, None)), 2);

    assert_eq!(code(&run_into(&dir.path().join("absent.toml"), &out, None)), 2);
}

#[test]
fn missing_data_is_a_runtime_abort() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.data_dir = dir.path().join("nowhere");
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let res = run_into(&path, &dir.path().join("out"), None);
    assert_eq!(code(&res), 3);
}

#[test]
fn partition_inspect_prints_every_client() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let res = bin().args(["partition", "--inspect", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let map: std::collections::BTreeMap<String, Vec<usize>> = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(map.len(), tiny_config().num_clients);
    let mut all: Vec<usize> = map.values().flatten().copied().collect();
    let n = all.len();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), n);
}

#[test]
fn oracles_pass() {
    for which in ["geomed", "trust"] {
        let res = bin().args(["oracle", which, "--instances", "30"]).output().unwrap();
        assert_eq!(code(&res), 0, "{which}");
        let report: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
        assert_eq!(report["failures"], 0);
        assert_eq!(report["instances"], 30);
    }
}
