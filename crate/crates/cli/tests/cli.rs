use std::io::ErrorKind;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures");

fn fixture(rel: &str) -> PathBuf {
    Path::new(FIXTURES).join(rel)
}

fn run_stdin(args: &[&str], stdin: &str) -> (i32, String) {
    let mut argv = vec!["qaroute"];
    argv.extend_from_slice(args);
    let mut input = stdin.as_bytes();
    let mut out = Vec::new();
    let code = qaroute_cli::run_with(argv, &mut input, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn run(args: &[&str]) -> (i32, String) {
    run_stdin(args, "")
}

fn json(out: &str) -> Value {
    serde_json::from_str(out).unwrap_or_else(|e| panic!("{e}: {out}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Config that points the offline recognizer at the fixture lexicon.
fn lexicon_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let doc = serde_json::json!({"providers": {"lexicon": fixture("kg/lexicon.tsv")}});
    std::fs::write(&path, doc.to_string()).unwrap();
    path
}

#[test]
fn decide_on_a_bare_pronoun_asks() {
    let (code, out) = run(&["decide", "--query", "it?", "--offline"]);
    assert_eq!(code, 0, "{out}");
    let v = json(&out);
    assert!((v["signals"]["ambiguity"].as_f64().unwrap() - 0.6).abs() < 1e-12);
    assert_eq!(v["action"], "ASK");
    assert_eq!(v["rule"], 3);
}

#[test]
fn phase_two_removes_edges() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = lexicon_config(dir.path());
    let graph = dir.path().join("g1.json");
    let (code, out) = run(&[
        "kg",
        "build",
        "--offline",
        "--config",
        s(&cfg),
        "--chunks",
        s(&fixture("kg/chunks.jsonl")),
        "--out",
        s(&graph),
        "--phase",
        "2",
    ]);
    assert_eq!(code, 0, "{out}");
    let v = json(&out);
    let stats = v["phase_stats"].as_array().unwrap();
    let edges = |phase: &str| {
        stats.iter().find(|p| p["phase"] == phase).unwrap()["edge_count"]
            .as_u64()
            .unwrap()
    };
    assert!(edges("G1") < edges("G0"), "{out}");
    for removed in v["reports"]["phase2"]["removed"].as_array().unwrap() {
        assert!(removed["sem"].as_f64().unwrap() < 0.5);
    }
    let (code, out) = run(&["kg", "stats", "--graph", s(&graph)]);
    assert_eq!(code, 0);
    assert_eq!(json(&out)["edges"].as_u64().unwrap(), edges("G1"));
}

#[test]
fn eval_matches_hand_computation() {
    let (code, out) = run(&["eval", "--in", s(&fixture("eval/golden.jsonl"))]);
    assert_eq!(code, 0, "{out}");
    let table_end = out.find("\n{").expect("table then JSON");
    assert!(out[..table_end].contains("Macro F1"));
    let got = json(&out[table_end + 1..]);
    let want: Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("eval/expected.json")).unwrap())
            .unwrap();
    for key in [
        "decision_accuracy",
        "macro_f1",
        "ask_recall",
        "abstain_recall",
        "hallucination_rate",
        "coverage_fraction",
        "compliance_rate",
    ] {
        let (g, w) = (got[key].as_f64().unwrap(), want[key].as_f64().unwrap());
        assert!((g - w).abs() < 1e-12, "{key}: {g} vs {w}");
    }
    for (action, f1) in want["f1"].as_object().unwrap() {
        let g = got["per_action"][action]["f1"].as_f64().unwrap();
        assert!((g - f1.as_f64().unwrap()).abs() < 1e-12, "{action}");
    }
    assert_eq!(got["confusion"]["counts"], want["confusion"]);
}

#[test]
fn eval_without_verdicts_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    std::fs::write(&path, r#"{"id":"x","gold_action":"ANSWER","predicted_action":"ANSWER","response":"","signals":null,"flags":{"malformed":false,"non_strict":false,"fallback":false,"rule":null}}"#).unwrap();
    assert_eq!(run(&["eval", "--in", s(&path)]).0, 1);
    let judge = dir.path().join("j.jsonl");
    std::fs::write(&judge, "{\"id\":\"x\",\"correct\":true}\n").unwrap();
    assert_eq!(
        run(&["eval", "--in", s(&path), "--judge-file", s(&judge)]).0,
        0
    );
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let out = Command::new(env!("CARGO_BIN_EXE_qaroute"))
        .args(["decide", "--query", "x", "--bogus"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = Command::new(env!("CARGO_BIN_EXE_qaroute"))
        .arg("--help")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn missing_input_file_exits_one() {
    assert_eq!(
        run(&["ingest", "validate", "--in", "/nonexistent/samples.jsonl"]).0,
        1
    );
}

#[test]
fn offline_mode_never_opens_a_connection() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let endpoint = serde_json::json!({"base_url": base, "model": "m", "timeout_secs": 1, "retry": {"attempts": 1, "initial_backoff_ms": 0}});
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("online.json");
    let doc = serde_json::json!({"providers": {"chat": endpoint, "embeddings": endpoint, "reranker": endpoint, "ner": endpoint}});
    std::fs::write(&cfg, doc.to_string()).unwrap();

    let (code, out) = run(&[
        "decide",
        "--config",
        s(&cfg),
        "--offline",
        "--query",
        "Who produced Silent Alarm?",
    ]);
    assert_eq!(code, 0, "{out}");
    assert!(
        matches!(listener.accept(), Err(e) if e.kind() == ErrorKind::WouldBlock),
        "offline run connected"
    );

    // The same configuration without --offline does reach the endpoint,
    // which never answers, so the run fails as a transport error.
    let (code, _) = run(&[
        "decide",
        "--config",
        s(&cfg),
        "--query",
        "Who produced Silent Alarm?",
    ]);
    assert_eq!(code, 2);
    assert!(listener.accept().is_ok());
}

#[test]
fn online_mode_without_endpoints_is_a_config_error() {
    assert_eq!(run(&["decide", "--query", "it?"]).0, 1);
}

#[test]
fn config_echo_tags_value_origins() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"gate": {"tau_amb": 0.5}}"#).unwrap();
    let (code, out) = run(&["config", "--config", s(&path), "--seed", "9"]);
    assert_eq!(code, 0, "{out}");
    let v = json(&out);
    assert_eq!(v["gate.tau_amb"]["value"], 0.5);
    assert_eq!(v["gate.tau_amb"]["source"], "file");
    assert_eq!(v["gate.tau_conf"]["source"], "default");
    assert_eq!(v["seed"]["value"], 9);
    assert_eq!(v["seed"]["source"], "flag");

    std::fs::write(&path, r#"{"gate": {"tau_typo": 0.5}}"#).unwrap();
    assert_eq!(run(&["config", "--config", s(&path)]).0, 1);
}

#[test]
fn graph_import_and_path() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("golden.json");
    let (code, out) = run(&[
        "kg",
        "import",
        "--tsv",
        s(&fixture("golden/graph.tsv")),
        "--out",
        s(&graph),
    ]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(json(&out)["edges"], 5);
    let (code, out) = run(&[
        "kg",
        "path",
        "--graph",
        s(&graph),
        "--from",
        "album",
        "--to",
        "best album of",
    ]);
    assert_eq!(code, 0, "{out}");
    let score = json(&out)["score"].as_f64().unwrap();
    assert!((score - 0.62 * 0.55).abs() < 1e-12);
    assert_eq!(
        run(&[
            "kg",
            "path",
            "--graph",
            s(&graph),
            "--from",
            "album",
            "--to",
            "nowhere"
        ])
        .0,
        1
    );
}

#[test]
fn offline_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = lexicon_config(d);
    let samples = fixture("kg/samples.jsonl");
    let (index, graph, ft, records) = (
        d.join("index"),
        d.join("g.json"),
        d.join("ft"),
        d.join("records.jsonl"),
    );
    let base = ["--offline", "--config", s(&cfg)];
    let with = |rest: &[&str]| -> (i32, String) {
        let mut args: Vec<&str> = rest.to_vec();
        args.extend_from_slice(&base);
        run(&args)
    };

    let (code, out) = with(&["ingest", "validate", "--in", s(&samples)]);
    assert_eq!(code, 0, "{out}");
    let (code, out) = with(&["index", "build", "--in", s(&samples), "--out", s(&index)]);
    assert_eq!(code, 0, "{out}");
    let (code, out) = with(&[
        "kg",
        "build",
        "--index",
        s(&index),
        "--samples",
        s(&samples),
        "--out",
        s(&graph),
    ]);
    assert_eq!(code, 0, "{out}");
    assert!(json(&out)["phase_stats"].as_array().unwrap().len() >= 4);
    let (code, out) = with(&[
        "ftdata",
        "build",
        "--graph",
        s(&graph),
        "--in",
        s(&samples),
        "--out",
        s(&ft),
    ]);
    assert_eq!(code, 0, "{out}");
    for f in ["chat.jsonl", "template.jsonl", "report.json"] {
        assert!(ft.join(f).exists(), "{f}");
    }

    for router in ["planner", "gate"] {
        let (code, out) = with(&[
            "route",
            "--batch",
            "--in",
            s(&samples),
            "--out",
            s(&records),
            "--index",
            s(&index),
            "--graph",
            s(&graph),
            "--router",
            router,
        ]);
        assert_eq!(code, 0, "{out}");
        let lines: Vec<Value> = std::fs::read_to_string(&records)
            .unwrap()
            .lines()
            .map(json)
            .collect();
        assert_eq!(lines.len(), 9);
        let judge = d.join("judge.jsonl");
        let verdicts: String = lines
            .iter()
            .map(|r| format!("{{\"id\":{},\"correct\":true}}\n", r["id"]))
            .collect();
        std::fs::write(&judge, verdicts).unwrap();
        let (code, out) = with(&["eval", "--in", s(&records), "--judge-file", s(&judge)]);
        assert_eq!(code, 0, "{out}");
    }

    let (code, out) = run_stdin(
        &[
            "repl",
            "--offline",
            "--config",
            s(&cfg),
            "--index",
            s(&index),
            "--graph",
            s(&graph),
        ],
        "Who produced Silent Alarm?\n:state\n:quit\n",
    );
    assert_eq!(code, 0, "{out}");
    assert!(
        out.contains("ANSWER") || out.contains("ASK") || out.contains("ABSTAIN"),
        "{out}"
    );
}
