use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn dscr() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/dscr")
}

/// `findoc` pointed at the DSCR fixture, with all outputs under `work`.
fn findoc(work: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_findoc"));
    cmd.arg("--corpus")
        .arg(dscr().join("corpus"))
        .arg("--dataset")
        .arg(dscr().join("dataset.jsonl"))
        .arg("--output")
        .arg(work.join("runs"))
        .arg("--index-dir")
        .arg(work.join("indices"))
        .args(["--backend", "scripted", "--script"])
        .arg(dscr().join("script.json"));
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn ask_without_index_is_a_data_error() {
    let work = tempfile::tempdir().unwrap();
    let o = run(findoc(work.path()).args(["ask", "--report", "acme_corp_2023", "--question", "What is the DSCR?"]));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("findoc index"), "{}", stderr(&o));
}

#[test]
fn index_then_bench_completes() {
    let work = tempfile::tempdir().unwrap();
    let o = run(findoc(work.path()).arg("index"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(work.path().join("indices/acme_corp_2023.bm25.page.json").is_file());

    let o = run(findoc(work.path()).args(["bench", "--pipeline", "agent", "--run-id", "cli"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("EM: 100.00"), "{}", stdout(&o));

    let transcript = work.path().join("runs/cli/transcripts/dscr-1.json");
    let t: Value = serde_json::from_str(&fs::read_to_string(transcript).unwrap()).unwrap();
    assert_eq!(t["termination"], "complete");
    assert_eq!(t["final_answer"], "1.5");

    let o = run(findoc(work.path()).args(["ask", "--report", "acme_corp_2023", "--question", "What is the DSCR?"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("answer: "), "{}", stdout(&o));
}

#[test]
fn score_of_correct_predictions() {
    let work = tempfile::tempdir().unwrap();
    let preds = work.path().join("predictions.jsonl");
    fs::write(&preds, "{\"id\": \"dscr-1\", \"prediction\": \"1.50\"}\n").unwrap();
    let o = run(findoc(work.path()).arg("score").arg("--predictions").arg(&preds).arg("--out").arg(work.path().join("scored")));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["em"], 100.0, "{report}");
    assert!(work.path().join("scored/scores.jsonl").is_file());
}

#[test]
fn usage_errors_exit_one() {
    let work = tempfile::tempdir().unwrap();
    assert_eq!(run(findoc(work.path()).arg("no-such-command")).status.code(), Some(1));
    assert_eq!(run(findoc(work.path()).args(["bench", "--workers", "many"])).status.code(), Some(1));
    assert_eq!(run(findoc(work.path()).arg("--help")).status.code(), Some(0));
}

#[test]
fn bad_config_exits_two() {
    let work = tempfile::tempdir().unwrap();
    let o = run(findoc(work.path()).args(["--set", "no_such_key=1", "config"]));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
