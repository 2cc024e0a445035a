use std::path::Path;
use std::process::{Command, Output};

fn nsrac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsrac"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 12] = [
    "--steps", "4", "--batch-size", "8", "--hidden-width", "8", "--set", "eval.rows=16", "--set", "eval.batch_size=8", "--set",
    "memory_probe=false",
];

#[test]
fn train_requires_seed() {
    let o = nsrac(&["train", "--setting", "needle"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "setting = \"needle\"\noutput_dir = \"x\"\n[train]\nkapa = 2\n").unwrap();
    let o = nsrac(&["train", "--config", s(&cfg), "--seed", "0"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("kapa"));

    let out = dir.path().join("run");
    let o = nsrac(&["train", "--setting", "needle", "--seed", "0", "--output-dir", s(&out), "--set", "train.min_temperature=-1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.min_temperature"));
    assert!(!out.exists());

    let o = nsrac(&["export-plot", "--run-dir", s(dir.path()), "--kind", "bar_chart"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("not_a_corpus.nrac");
    std::fs::write(&bogus, b"garbage bytes").unwrap();
    let o = nsrac(&["inspect-corpus", s(&bogus)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_eval_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train", "--setting", "needle", "--seed", "3", "--output-dir", s(&out), "--history-size", "4"];
    args.extend(TINY);
    let o = nsrac(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("config_hash"), "{stdout}");
    assert!(out.join("rep0/metrics.csv").exists());
    assert!(!out.join("rep0/memory.csv").exists());

    let cfg = out.join("config.toml");
    let ck = out.join("rep0/checkpoint.bin");
    let o = nsrac(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("final_accuracy"));

    let o = nsrac(&["export-plot", "--run-dir", s(&out), "--kind", "entropy_vs_step"]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(out.join("entropy_vs_step.csv")).unwrap();
    assert_eq!(text.lines().nth(1), Some("step,entropy"));
    assert_eq!(text.lines().count(), 2 + 4);

    let o = nsrac(&["export-plot", "--run-dir", s(&out), "--kind", "accuracy_vs_time"]);
    assert_eq!(code(&o), 2);
    assert!(!out.join("accuracy_vs_time.csv").exists());
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "setting = \"needle\"\noutput_dir = \"unused\"\n[needle]\nhistory_size = 4\n").unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--config", s(&cfg), "--seed", "11", "--output-dir", s(&out)];
        args.extend(TINY);
        let o = nsrac(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(std::fs::read_to_string(out.join("rep0/metrics.csv")).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn corpus_generation_and_inspection() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.nrac");
    let o = nsrac(&["gen-corpus", "--out", s(&p), "--kind", "random", "--records", "50", "--key-dim", "4", "--feature-dim", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = nsrac(&["inspect-corpus", s(&p)]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("record_count = 50"));
    assert!(text.contains("feature_dim = 3"));
    assert!(text.contains("key_dim = 4"));

    let p = dir.path().join("r.nrac");
    let o = nsrac(&["gen-corpus", "--out", s(&p), "--records", "20", "--key-dim", "8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn memory_sweep_reports_a_fit() {
    let dir = tempfile::tempdir().unwrap();
    let o = nsrac(&[
        "sweep-memory", "--axis", "records", "--values", "100,200,400", "--work-dir", s(dir.path()), "--key-dim", "8",
        "--feature-dim", "4", "--batch-size", "2", "--kappa", "1", "--steps", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("slope = 40"), "{text}");
    let o = nsrac(&["export-plot", "--run-dir", s(dir.path()), "--kind", "memory_vs_hparam"]);
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("memory_vs_hparam.csv").exists());
}

#[test]
fn needle_sweep_prints_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep-needle", "--history-sizes", "2,4", "--seeds", "0", "--output-dir", s(dir.path())];
    args.extend(TINY);
    let o = nsrac(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 3, "{text}");
    assert!(dir.path().join("k4_s0/summary.toml").exists());
    assert!(dir.path().join("needle_sweep.csv").exists());
}
