use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

fn dfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn validate_data_accepts_fixture() {
    let out = dfr(&["validate-data", "--kb", &fixture("kb.json"), "--dialogues", &fixture("dialogues.json")]);
    assert!(stdout(&out).contains("6 entities, 4 dialogues, 6 turns"));
}

#[test]
fn validate_data_rejects_unknown_gold_id() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"dialogues": [{"id": "x", "turns": [{"user": "hi", "system": "hello", "gold_entity_ids": ["nope"]}]}]}"#,
    )
    .unwrap();
    let out = dfr(&["validate-data", "--kb", &fixture("kb.json"), "--dialogues", bad.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn unknown_flag_prints_usage() {
    let out = dfr(&["retrieve", "--frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn retrieve_lists_k_non_increasing_scores() {
    let out = dfr(&[
        "retrieve",
        "--kb",
        &fixture("kb.json"),
        "--config",
        &fixture("run.toml"),
        "--query",
        "[user]: cheap chinese food",
        "--k",
        "3",
    ]);
    let text = stdout(&out);
    let scores: Vec<f64> = text
        .lines()
        .map(|l| l.split('\t').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(scores.len(), 3);
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn sweep_k_recall_is_monotone() {
    let out = dfr(&[
        "sweep-k",
        "--kb",
        &fixture("kb.json"),
        "--config",
        &fixture("run.toml"),
        "--dialogues",
        &fixture("dialogues.json"),
        "--k",
        "1,3,7,10",
    ]);
    let text = stdout(&out);
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r[0] as usize).collect::<Vec<_>>(), [1, 3, 7, 10]);
    assert!(rows.windows(2).all(|w| w[0][1] <= w[1][1]));
}

#[test]
fn pretrain_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pre = dir.path().join("pre.ckpt");
    let run = dir.path().join("run");
    let (kb, config, dialogues) = (fixture("kb.json"), fixture("run.toml"), fixture("dialogues.json"));
    let common = ["--kb", kb.as_str(), "--config", config.as_str()];
    let mut args = vec!["pretrain"];
    args.extend(common);
    args.extend(["--dialogues", &dialogues, "--out", pre.to_str().unwrap()]);
    stdout(&dfr(&args));

    let mut args = vec!["train"];
    args.extend(common);
    args.extend([
        "--dialogues",
        &dialogues,
        "--validation",
        &dialogues,
        "--checkpoint",
        pre.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--strategy",
        "argmin_entityf1",
        "--steps",
        "3",
        "--lr",
        "0.01",
    ]);
    let meta: serde_json::Value = serde_json::from_str(stdout(&dfr(&args)).trim()).unwrap();
    assert!(meta["entity_f1"].is_number());
    for f in ["encoder.ckpt", "meta.json", "history.json", "stats.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let report = dir.path().join("report.jsonl");
    let mut args = vec!["eval"];
    args.extend(common);
    args.extend([
        "--dialogues",
        &dialogues,
        "--checkpoint",
        run.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    let table = stdout(&dfr(&args));
    assert!(table.contains("Re@3"));
    let lines = std::fs::read_to_string(&report).unwrap();
    assert_eq!(lines.lines().count(), 7);
    for l in lines.lines() {
        serde_json::from_str::<serde_json::Value>(l).unwrap();
    }
}

#[test]
fn trace_emits_one_record() {
    let out = dfr(&[
        "trace",
        "--kb",
        &fixture("kb.json"),
        "--config",
        &fixture("run.toml"),
        "--dialogues",
        &fixture("dialogues.json"),
        "--dialogue",
        "d1",
        "--turn",
        "1",
        "--k",
        "2",
    ]);
    let v: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(v["dialogue_id"], "d1");
    assert_eq!(v["turn"], 1);
    assert_eq!(v["feedback"]["entity_ids"].as_array().unwrap().len(), 2);
    assert!(v["feedback"]["grad_norm"].is_number());
}

#[test]
fn bad_strategy_fails() {
    let out = dfr(&[
        "trace",
        "--kb",
        &fixture("kb.json"),
        "--dialogues",
        &fixture("dialogues.json"),
        "--dialogue",
        "d1",
        "--strategy",
        "nope",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn synth_output_validates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("syn");
    stdout(&dfr(&["synth", "--entities", "10", "--dialogues", "12", "--out", out.to_str().unwrap()]));
    let text = stdout(&dfr(&[
        "validate-data",
        "--kb",
        out.join("kb.json").to_str().unwrap(),
        "--dialogues",
        out.join("train.json").to_str().unwrap(),
        out.join("validation.json").to_str().unwrap(),
    ]));
    assert!(text.contains("10 entities, 12 dialogues"));
}
