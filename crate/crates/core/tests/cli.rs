use std::path::Path;
use std::process::{Command, Output};

use dahg::corpus::write_jsonl;
use dahg::synthetic::desk_fixture;

fn dahg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dahg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = dahg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn every_subcommand_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pairs = desk_fixture();
    let (train, test) = pairs.split_at(40);
    write_jsonl(d.join("train.jsonl"), train).unwrap();
    write_jsonl(d.join("test.jsonl"), test).unwrap();
    let run = d.join("run");
    let train_path = d.join("train.jsonl");

    ok(&["build-index", "--corpus", s(&d.join("train.jsonl")), "--out", s(&d.join("index.json"))]);
    let small = [
        "--steps", "6", "--batch-size", "8", "--emb-dim", "8", "--hidden", "8", "--latent", "4", "--dec-hidden", "8",
        "--dec-output", "8", "--gate-hidden", "8", "--recon-hidden", "8", "--min-len", "2", "--max-len", "6",
    ];
    let mut args = vec!["train", "--corpus", s(&train_path), "--out", s(&run)];
    args.extend(small);
    ok(&args);
    assert!(run.join("latest").exists());
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 7);

    // resuming extends the same run
    ok(&["train", "--corpus", s(&d.join("train.jsonl")), "--out", s(&run), "--resume", "--steps", "9"]);
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 10);
    assert!(run.join("ckpt-9.bin").exists());

    let out = ok(&["generate", "--model", s(&run), "--index", s(&d.join("index.json")), "--input", s(&d.join("test.jsonl"))]);
    let lines: Vec<serde_json::Value> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), test.len());
    assert!(lines.iter().all(|l| l["headline"].is_string() && l["prototype_id"].is_string()));

    let csv = d.join("scores.csv");
    let json = d.join("scores.json");
    ok(&[
        "evaluate", "--model", s(&run), "--index", s(&d.join("index.json")), "--input", s(&d.join("test.jsonl")),
        "--out-csv", s(&csv), "--out-json", s(&json),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    let systems: Vec<&str> = report.as_array().unwrap().iter().map(|s| s["system"].as_str().unwrap()).collect();
    assert_eq!(systems, ["dahg", "lead"]);

    let out = ok(&["inspect-latent", "--model", s(&run), "--input", s(&d.join("test.jsonl"))]);
    let text = String::from_utf8(out.stdout).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + 2 * 4);
    assert_eq!(text.lines().count(), 1 + test.len());
}

#[test]
fn reference_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let test = &desk_fixture()[..10];
    write_jsonl(d.join("test.jsonl"), test).unwrap();
    let preds: String = test
        .iter()
        .map(|p| serde_json::json!({ "id": p.id, "headline": p.headline.join(" ") }).to_string() + "\n")
        .collect();
    std::fs::write(d.join("preds.jsonl"), preds).unwrap();
    let json = d.join("scores.json");
    ok(&[
        "evaluate", "--predictions", s(&d.join("preds.jsonl")), "--input", s(&d.join("test.jsonl")),
        "--out-csv", s(&d.join("scores.csv")), "--out-json", s(&json),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    let echo = &report[0];
    assert_eq!(echo["system"], "predictions");
    for k in ["rouge_1", "rouge_2", "rouge_l", "bleu"] {
        assert_eq!(echo[k].as_f64().unwrap(), 1.0, "{k}");
    }
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let out = dahg(&["build-index", "--corpus", "/definitely/missing.jsonl", "--out", "/tmp/never.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("/definitely/missing.jsonl"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    let mut bytes = b"DAHGCKPT".to_vec();
    bytes.extend(7u32.to_le_bytes());
    bytes.extend([0u8; 64]);
    std::fs::write(&bad, bytes).unwrap();
    let out = dahg(&["inspect-latent", "--model", s(&bad), "--input", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("version 7"), "{err}");

    let out = dahg(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}
