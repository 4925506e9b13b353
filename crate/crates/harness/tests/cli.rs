use std::process::{Command, Output};

fn attnlab(args: &[&str], out: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnlab")).args(args).arg("--quiet").env("ATTNLAB_OUT", out).output().unwrap()
}

#[test]
fn malformed_jsonl_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.jsonl");
    let good = r#"{"id":"a","tokens":["Paris","is","big","."],"sentence_spans":[[0,4]],"entity_spans":[{"start":0,"end":1,"mention":"Paris","sentence_index":0}]}"#;
    std::fs::write(&input, format!("{good}\n{{\"id\": \"b\", \"tokens\": \n")).unwrap();
    let out = attnlab(&["build-graph", "--input", input.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 2"), "{stderr}");
}

#[test]
fn build_graph_writes_graphs_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("ok.jsonl");
    let ex = r#"{"id":"a","tokens":["Paris","met","Rome","."],"sentence_spans":[[0,4]],"entity_spans":[{"start":0,"end":1,"mention":"Paris","sentence_index":0},{"start":2,"end":3,"mention":"Rome","sentence_index":0}]}"#;
    std::fs::write(&input, format!("{ex}\n\n")).unwrap();
    let out_dir = dir.path().join("out");
    let out = attnlab(&["build-graph", "--input", input.to_str().unwrap()], &out_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("graphs.csv")).unwrap();
    assert_eq!(csv, "id,nodes,edges,density\na,2,4,1\n");
    assert!(out_dir.join("graphs.jsonl").exists());
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(attnlab(&["gradcheck", "--no-such-flag"], dir.path()).status.code(), Some(2));
    let out = attnlab(&["gen-synthetic", "--set", "epoch=3"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));
    let out = attnlab(&["build-graph", "--input", "/definitely/missing.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn equivalence_check_passes_with_default_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = attnlab(&["equivalence-check"], dir.path());
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("equivalence.json")).unwrap()).unwrap();
    assert!(report["max_deviation"].as_f64().unwrap() <= 1e-12);
    assert_eq!(report["instances"], 1000);
}

#[test]
fn failed_checks_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    // A tolerance no floating-point comparison can meet.
    let out =
        attnlab(&["gradcheck", "--set", "gradcheck_instances=2", "--set", "gradcheck_tolerance=1e-300"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_and_overrides_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "num_examples = 30\nnum_test_examples = 10\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_attnlab"))
        .args(["gen-synthetic", "--config", cfg.to_str().unwrap(), "--set", "data_seed=3", "--out"])
        .arg(dir.path().join("out"))
        .arg("--quiet")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let used = std::fs::read_to_string(dir.path().join("out/config_used.toml")).unwrap();
    assert!(used.contains("num_examples = 30") && used.contains("data_seed = 3"), "{used}");
    let train = std::fs::read_to_string(dir.path().join("out/synthetic_train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 30);
}
