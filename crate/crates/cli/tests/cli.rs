use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use efat_core::config::ExperimentConfig;
use efat_core::data::load_dataset;

fn efat(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efat"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn efat")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn partition_writes_client_files_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = efat(&["partition", "--gamma", "0.01", "--clients", "5"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for k in 0..5 {
        let d = load_dataset(dir.path().join(format!("client_{k}.bin"))).unwrap();
        assert!(!d.is_empty());
    }
    assert!(!dir.path().join("client_5.bin").exists());
    let summary = fs::read_to_string(dir.path().join("partition_summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("client,examples,class_0,"));
    assert_eq!(lines[0].split(',').count(), 12);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let o = efat(&["partition", "--seed", "4"], dir);
        assert!(o.status.success());
    }
    for name in ["client_0.bin", "public.bin", "partition_summary.csv", "config.toml"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn config_errors_exit_nonzero_with_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = efat(&["partition", "--gamma", "-1"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));

    let o = efat(&["run", "--set", "federation.colour=3"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));

    let o = efat(&["run", "--config", "/nonexistent/efat.toml"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn gradcheck_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = efat(&["gradcheck"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn compare_emits_one_ranking_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = efat(
        &["compare", "--strategies", "baseline,efat", "--seeds", "3", "--rounds", "3"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    // strategy + (clean, pgd10, pgd20) x (mean, std)
    assert_eq!(rows[0].split(',').count(), 1 + 2 * 2 + 2);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.matches("ranking:").count(), 1);
}

#[test]
fn run_snapshot_reproduces_metrics_and_eval_reads_model() {
    let first = tempfile::tempdir().unwrap();
    let o = efat(&["run", "--rounds", "4", "--strategy", "efnt_at", "--checkpoints"], first.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(first.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 5);
    assert!(metrics.lines().nth(1).unwrap().starts_with("0,efnt_at,"));
    assert!(first.path().join("checkpoints/round_0004.bin").exists());

    let snapshot = first.path().join("config.toml");
    let cfg = ExperimentConfig::load(&snapshot).unwrap();
    assert_eq!(cfg.federation.rounds, 4);
    let second = tempfile::tempdir().unwrap();
    let o = efat(&["run", "--config", snapshot.to_str().unwrap()], second.path());
    assert!(o.status.success());
    assert_eq!(metrics, fs::read_to_string(second.path().join("metrics.csv")).unwrap());
    assert_eq!(
        fs::read(&snapshot).unwrap(),
        fs::read(second.path().join("config.toml")).unwrap()
    );

    let third = tempfile::tempdir().unwrap();
    let model = first.path().join("model.bin");
    let o = efat(
        &["eval", "--config", snapshot.to_str().unwrap(), "--model", model.to_str().unwrap()],
        third.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let eval = fs::read_to_string(third.path().join("eval.csv")).unwrap();
    let lines: Vec<&str> = eval.lines().collect();
    assert_eq!(lines, ["attack,accuracy", lines[1], lines[2], lines[3]]);
    assert!(lines[1].starts_with("clean,") && lines[2].starts_with("pgd10,"));
}

#[test]
fn workers_env_var_is_a_fallback() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_efat"))
        .args(["run", "--rounds", "2", "--out"])
        .arg(a.path())
        .env("EFAT_WORKERS", "3")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let o = efat(&["run", "--rounds", "2", "--workers", "1"], b.path());
    assert!(o.status.success());
    assert_eq!(
        fs::read(a.path().join("metrics.csv")).unwrap(),
        fs::read(b.path().join("metrics.csv")).unwrap()
    );
    let o = efat(&["run", "--workers", "0"], b.path());
    assert!(!o.status.success());
}
