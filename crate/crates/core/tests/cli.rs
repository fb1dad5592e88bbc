mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{fixture, SMOKE_QUESTION};

fn citetree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_citetree"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn smoke_config() -> String {
    fixture("smoke/config.toml").display().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn index_reports_passage_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("index.json");
    let o = citetree(&["index", s(&fixture("smoke/corpus.jsonl")), s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "indexed 5 passages");
    assert!(out.exists());
}

#[test]
fn missing_corpus_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = citetree(&[
        "index",
        s(&dir.path().join("absent.jsonl")),
        s(&dir.path().join("i.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn malformed_corpus_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("bad.jsonl");
    std::fs::write(
        &corpus,
        "{\"id\": 1, \"title\": \"a\", \"text\": \"b\"}\n{not json\n",
    )
    .unwrap();
    let o = citetree(&["index", s(&corpus), s(&dir.path().join("i.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = citetree(&["ask", "q", "--config", &smoke_config(), "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ask_is_deterministic_and_cites() {
    let a = citetree(&["ask", SMOKE_QUESTION, "--config", &smoke_config()]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let b = citetree(&["ask", SMOKE_QUESTION, "--config", &smoke_config()]);
    assert_eq!(stdout(&a), stdout(&b));
    let text = stdout(&a);
    assert!(text.contains("64 yards"), "{text}");
    assert!(text.contains("References:"));
    assert!(text.contains("calls: policy="));
    assert!(!text.contains("(partial"));
}

#[test]
fn ablation_flags_reach_the_call_ledger() {
    let o = citetree(&[
        "ask",
        SMOKE_QUESTION,
        "--config",
        &smoke_config(),
        "--no-reflection",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("reflector=0"), "{}", stdout(&o));

    let o = citetree(&[
        "ask",
        SMOKE_QUESTION,
        "--config",
        &smoke_config(),
        "--no-rg",
        "--no-ra",
    ]);
    let text = stdout(&o);
    assert!(
        text.contains("scorer_policy=0 scorer_reference=0 judge=0"),
        "{text}"
    );
}

#[test]
fn dumped_tree_can_be_inspected() {
    let dir = tempfile::tempdir().unwrap();
    let tree = dir.path().join("tree.json");
    let o = citetree(&[
        "ask",
        SMOKE_QUESTION,
        "--config",
        &smoke_config(),
        "--dump-tree",
        s(&tree),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let o = citetree(&["inspect-tree", s(&tree)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("nodes="));

    let o = citetree(&["inspect-tree", s(&tree), "--dot"]);
    assert!(stdout(&o).starts_with("digraph"));
}

#[test]
fn eval_writes_reports_and_honours_limit() {
    let dir = tempfile::tempdir().unwrap();
    let o = citetree(&[
        "eval",
        "--config",
        &smoke_config(),
        "--limit",
        "2",
        "--report-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("items=2"), "{}", stdout(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["items"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn invalid_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("data.json");
    std::fs::write(&bad, "[{\"no_question\": 1}]").unwrap();
    let o = citetree(&[
        "eval",
        "--config",
        &smoke_config(),
        "--dataset",
        s(&bad),
        "--report-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
