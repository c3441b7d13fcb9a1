use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn modalnet(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modalnet"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(output: &Output) -> String {
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    String::from_utf8(output.stdout.clone()).unwrap()
}

fn error_line(output: &Output) -> String {
    assert_eq!(output.status.code(), Some(2));
    String::from_utf8_lossy(&output.stderr).lines().last().unwrap().to_string()
}

#[test]
fn unknown_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = modalnet(&["export-dot", "--no-such-flag"], dir.path());
    assert!(!out.status.success());
    let out = modalnet(&["export-dot", "--attention", "sideways"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn failures_report_a_category() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = modalnet(&["build", "--table", missing.to_str().unwrap()], dir.path());
    assert!(error_line(&out).starts_with("error[io]:"));

    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"num_classes": 2, "blocks": [
            {"index": 0, "level": 0, "inputs": [], "channels": 4, "dilation": 1, "stride": 1, "kind": "rgb"},
            {"index": 1, "level": 1, "inputs": [0], "channels": 4, "dilation": 1, "stride": 1, "kind": "conv"},
            {"index": 2, "level": 1, "inputs": [1], "channels": 4, "dilation": 1, "stride": 1, "kind": "conv"}]}"#,
    )
    .unwrap();
    let out = modalnet(&["build", "--table", bad.to_str().unwrap()], dir.path());
    assert!(error_line(&out).starts_with("error[table]:"));

    let out = modalnet(&["eval", "--stem", "absent", "--iters", "2"], dir.path());
    assert!(error_line(&out).starts_with("error[io]:"));
}

#[test]
fn export_dot_and_cost_write_under_out() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&modalnet(&["export-dot"], dir.path()));
    assert!(text.contains("15 nodes, 46 connection edges, 0 attention edges"));
    let dot = fs::read_to_string(dir.path().join("graph.dot")).unwrap();
    assert_eq!(modalnet::graph::dot_counts(&dot), (15, 46, 0));
    let config: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(config["command"], "export-dot");
    assert_eq!(config["outputs"], serde_json::json!(["graph.dot", "config.json"]));

    let peer = tempfile::tempdir().unwrap();
    ok(&modalnet(&["export-dot", "--attention", "peer"], peer.path()));
    let dot = fs::read_to_string(peer.path().join("graph.dot")).unwrap();
    assert_eq!(modalnet::graph::dot_counts(&dot), (15, 46, 46));

    let cost = tempfile::tempdir().unwrap();
    let table = ok(&modalnet(&["cost", "--attention", "peer", "--size", "32", "--frames", "2"], cost.path()));
    assert!(table.contains("attention_heads"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(cost.path().join("cost.json")).unwrap()).unwrap();
    assert_eq!(report["input"], serde_json::json!([1, 2, 32, 32]));
    assert!(report["components"]["attention_heads"]["params"].as_u64().unwrap() > 0);
}

#[test]
fn gen_data_dumps_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    ok(&modalnet(&["gen-data"], dir.path()));
    for name in ["train.bin", "train.json", "test.bin", "test.json"] {
        assert!(dir.path().join("data").join(name).exists(), "{name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("data/test.json")).unwrap()).unwrap();
    assert!(manifest.to_string().contains("400"));
}

#[test]
fn train_prune_and_eval_chain() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--iters", "4", "--depth-scale", "1/3", "--attention", "oneshot"];
    ok(&modalnet(&[&["train"][..], &common[..]].concat(), dir.path()));
    assert!(dir.path().join("trained.bin").exists());
    assert!(fs::read_to_string(dir.path().join("metrics.csv")).unwrap().starts_with("iter,lr,loss,metric_name,metric_value\n"));
    let text = ok(&modalnet(&[&["prune", "--stem", "trained"][..], &common[..]].concat(), dir.path()));
    assert!(text.starts_with("kept "));
    let text = ok(&modalnet(&[&["eval", "--stem", "trained_pruned"][..], &common[..]].concat(), dir.path()));
    assert!(text.starts_with("test_accuracy "));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&eval["test_accuracy"].as_f64().unwrap()));
}

#[test]
fn search_reruns_are_bit_identical() {
    let args = ["search", "--iters", "6", "--depth-scale", "1/3", "--finetune-iters", "2", "--seed", "3"];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&modalnet(&args, a.path()));
    ok(&modalnet(&args, b.path()));
    for name in ["metrics.csv", "pruned.bin", "searched.bin", "pruned.dot"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let dot = fs::read_to_string(a.path().join("pruned.dot")).unwrap();
    let (_, solid, dashed) = modalnet::graph::dot_counts(&dot);
    assert_eq!(solid, dashed);
}
