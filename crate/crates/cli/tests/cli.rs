//! End-to-end tests of the `damper` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn damper(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_damper")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "[corpus]\ndocs_per_domain = 8\n[encoder]\nepochs = 5\n[policy]\nepochs = 3\n[policy.dpo]\nepochs = 3\n";

#[test]
fn audit_reports_bound() {
    let o = damper(&["audit-dp", "--r1", "5", "--r2", "20", "--tau2", "10.4", "--vocab", "6", "--trials", "2000"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["holds"], true);
    assert!(v["max_log_ratio"].as_f64().unwrap() <= v["bound"].as_f64().unwrap());
}

#[test]
fn validation_errors_exit_with_one() {
    assert_eq!(code(&damper(&["no-such-command"])), 1);
    assert_eq!(code(&damper(&["audit-dp", "--r1", "30", "--r2", "20"])), 1);
    assert_eq!(code(&damper(&["train-encoder", "--corpus", "/nonexistent.jsonl", "--out", "/tmp/x.json"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[preference]\nalpha = 2.0\n").unwrap();
    assert_eq!(code(&damper(&["--config", p(&cfg), "audit-dp"])), 1);
    // a corpus is required but --out is missing
    let corpus = dir.path().join("c.jsonl");
    assert_eq!(code(&damper(&["--config", p(&cfg), "gen-corpus"])), 1);
    std::fs::write(&corpus, "").unwrap();
    assert_eq!(code(&damper(&["train-encoder", "--corpus", p(&corpus)])), 1);
}

#[test]
fn help_exits_cleanly() {
    let o = damper(&["--help"]);
    assert_eq!(code(&o), 0);
    let s = String::from_utf8_lossy(&o.stdout);
    for sub in [
        "gen-corpus", "chunk", "train-encoder", "build-prototypes", "build-preferences", "pretrain-ref", "train-dpo",
        "detect", "rewrite", "evaluate", "audit-dp",
    ] {
        assert!(s.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn stage_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let corpus = dir.path().join("c.jsonl");
    let reference = dir.path().join("ref.json");
    assert_eq!(code(&damper(&["--config", p(&cfg), "--out", p(&corpus), "gen-corpus"])), 0);
    assert_eq!(code(&damper(&["--config", p(&cfg), "--out", p(&reference), "pretrain-ref", "--corpus", p(&corpus)])), 0);
    let prefs = dir.path().join("empty.jsonl");
    std::fs::write(&prefs, "").unwrap();
    let o = damper(&[
        "--out",
        p(&dir.path().join("pol.json")),
        "train-dpo",
        "--prefs",
        p(&prefs),
        "--reference",
        p(&reference),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn chunk_command_emits_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("t.txt");
    std::fs::write(&f, "She reports chest pain and a new book.\n\nHe was charged with fraud.\n").unwrap();
    for variant in ["rule", "ngram"] {
        let o = damper(&["chunk", "--in", p(&f), "--variant", variant, "--max-len", "2"]);
        assert_eq!(code(&o), 0);
        let lines: Vec<Value> =
            String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1]["line"], 3);
        assert!(!lines[0]["chunks"].as_array().unwrap().is_empty());
    }
    assert_eq!(code(&damper(&["chunk", "--in", p(&f), "--variant", "bogus"])), 1);
}

#[test]
fn staged_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = |f: &str| dir.path().join(f);
    std::fs::write(d("small.toml"), SMALL).unwrap();
    let cfg = d("small.toml");
    let run = |args: &[&str]| {
        let mut all = vec!["--config", p(&cfg), "--seed", "5"];
        all.extend_from_slice(args);
        let o = damper(&all);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["--out", p(&d("corpus.jsonl")), "gen-corpus", "--split"]);
    assert!(d("corpus.train.jsonl").exists() && d("corpus.test.jsonl").exists());
    let train = d("corpus.train.jsonl");
    let test = d("corpus.test.jsonl");
    run(&["--out", p(&d("enc.json")), "train-encoder", "--corpus", p(&train)]);
    run(&["--out", p(&d("protos.json")), "build-prototypes", "--model", p(&d("enc.json")), "--corpus", p(&train), "--method", "kmeans"]);
    let protos: Value = serde_json::from_str(&std::fs::read_to_string(d("protos.json")).unwrap()).unwrap();
    assert_eq!(protos["domains"].as_array().unwrap().len(), 3);
    assert_eq!(protos["domains"][0]["method"], "kmeans");
    run(&["--out", p(&d("ref.json")), "pretrain-ref", "--corpus", p(&train)]);
    run(&[
        "--out", p(&d("prefs.jsonl")), "build-preferences", "--model", p(&d("enc.json")), "--protos", p(&d("protos.json")),
        "--policy", p(&d("ref.json")), "--corpus", p(&train), "--alpha", "0.3", "--n", "6",
    ]);
    run(&["--out", p(&d("pol.json")), "train-dpo", "--prefs", p(&d("prefs.jsonl")), "--reference", p(&d("ref.json")), "--beta", "0.1"]);
    run(&["--out", p(&d("det.jsonl")), "detect", "--model", p(&d("enc.json")), "--protos", p(&d("protos.json")), "--in", p(&test)]);
    run(&[
        "--out", p(&d("rw.jsonl")), "rewrite", "--model", p(&d("enc.json")), "--protos", p(&d("protos.json")),
        "--policy", p(&d("pol.json")), "--in", p(&test), "--eps-text", "150", "--r1", "5", "--r2", "20", "--nsp-max", "52",
    ]);
    let rewrites = std::fs::read_to_string(d("rw.jsonl")).unwrap();
    let test_docs = std::fs::read_to_string(&test).unwrap().lines().count();
    assert_eq!(rewrites.lines().count(), test_docs);
    for l in rewrites.lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        assert!(v["realized_eps"].as_f64().unwrap() <= 150.0);
        assert_eq!(v["eps_token"].as_f64().unwrap(), 150.0 / 52.0);
    }
}

#[test]
fn train_then_evaluate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("run");
    let o = damper(&["--config", p(&cfg), "--out", p(&out), "train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["aggregate"]["pf1"].as_f64().is_some());

    let again = dir.path().join("report2.json");
    let o = damper(&["--config", p(&cfg), "--out", p(&again), "evaluate", "--bundle", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(out.join("report.json")).unwrap(), std::fs::read(&again).unwrap());
}
