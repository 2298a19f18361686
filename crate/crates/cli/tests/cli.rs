use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn dptrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dptrain"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dptrain-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn accountant_round_trip() {
    let v = json(&dptrain(&["accountant", "--sigma", "1", "--q", "0.01", "--steps", "1000"]));
    let eps = v["epsilon"].as_f64().unwrap();
    assert!(eps > 2.0 && eps < 3.0, "{eps}");
    let back = json(&dptrain(&[
        "accountant",
        "--epsilon",
        &eps.to_string(),
        "--q",
        "0.01",
        "--steps",
        "1000",
    ]));
    let sigma = back["sigma_dp"].as_f64().unwrap();
    assert!((sigma - 1.0).abs() < 0.01, "{sigma}");
    let bad = dptrain(&["accountant", "--epsilon", "1e-6", "--q", "0.5", "--steps", "10000"]);
    assert!(!bad.status.success());
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = scratch("train");
    let log = dir.join("log.tsv");
    let report = dir.join("report.json");
    let ckpt = dir.join("model.ckpt");
    let s = |p: &PathBuf| p.to_str().unwrap().to_string();
    let out = dptrain(&["synth", "--users", "60", "--items", "30", "--seed", "2", "--out", &s(&log)]);
    assert!(out.status.success());
    let data = [
        "--data".to_string(),
        s(&log),
        "--min-count".into(),
        "2".into(),
        "--max-len".into(),
        "10".into(),
    ];
    let mut train: Vec<String> = vec!["train".into()];
    train.extend(data.iter().cloned());
    train.extend(
        [
            "--sigma", "1", "--epochs", "2", "--batch", "16", "--d-model", "8", "--blocks", "1", "--eval-every", "1",
            "--out",
        ]
        .iter()
        .map(|x| x.to_string()),
    );
    train.push(s(&report));
    train.push("--checkpoint".into());
    train.push(s(&ckpt));
    let args: Vec<&str> = train.iter().map(String::as_str).collect();
    let out = dptrain(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("NDCG@10"));
    let first = std::fs::read(&report).unwrap();
    let rep: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(rep["history"].as_array().unwrap().len(), 2);
    assert!(rep["runtime_seconds"].is_null());

    // Same command, same bytes.
    assert!(dptrain(&args).status.success());
    assert_eq!(std::fs::read(&report).unwrap(), first);

    let mut eval: Vec<String> = vec!["eval".into()];
    eval.extend(data.iter().cloned());
    eval.push("--checkpoint".into());
    eval.push(s(&ckpt));
    let args: Vec<&str> = eval.iter().map(String::as_str).collect();
    let m = json(&dptrain(&args));
    assert!(m["ndcg"].as_f64().unwrap() <= m["hit"].as_f64().unwrap());
    // With the training noise level the corrected evaluation reproduces the report.
    eval.extend(["--sigma", "1", "--batch", "16"].iter().map(|x| x.to_string()));
    let args: Vec<&str> = eval.iter().map(String::as_str).collect();
    let corrected = json(&dptrain(&args));
    let last = rep["history"].as_array().unwrap().last().unwrap();
    assert_eq!(corrected["ndcg"], last["ndcg"], "{corrected} vs {last}");
    assert!(!dptrain(&["eval", "--checkpoint", "x", "--sigma", "1"]).status.success());

    let mut summary: Vec<String> = vec!["summary".into()];
    summary.extend(data.iter().cloned());
    let args: Vec<&str> = summary.iter().map(String::as_str).collect();
    let v = json(&dptrain(&args));
    assert!(v["users"].as_u64().unwrap() > 0);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn strict_ingest_rejects_garbage() {
    let dir = scratch("strict");
    let log = dir.join("bad.tsv");
    std::fs::write(&log, "1\t2\t3\nnonsense\n").unwrap();
    let path = log.to_str().unwrap();
    let out = dptrain(&["summary", "--data", path, "--strict"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn gradient_check_and_memory_report() {
    for sharing in ["on", "off"] {
        let v = json(&dptrain(&["check-grad", "--sharing", sharing]));
        assert!(v["max_relative_error"].as_f64().unwrap() < 1e-4);
    }
    let v = json(&dptrain(&["bench-clip", "--memory-only", "--method", "ghost"]));
    let items = v["items"].as_array().unwrap();
    assert!(items.iter().any(|i| i[0] == "candidate_gram"));
    let v = json(&dptrain(&["bench-clip", "--b", "2", "--l", "4", "--m", "20", "--d", "4", "--repeats", "1"]));
    assert!(v["mean_seconds"].as_f64().unwrap() > 0.0);
}

#[test]
fn distraction_table() {
    let out = dptrain(&["distraction", "--sigma-sq", "0,0.5", "--samples", "20000"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("sigma_sq\tpredicted"));
    let fields: Vec<&str> = lines[2].split('\t').collect();
    let predicted: f64 = fields[1].parse().unwrap();
    assert!((predicted - 0.5f64.exp()).abs() < 1e-3);
}
