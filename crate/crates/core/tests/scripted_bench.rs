mod common;

use std::fs;

use findoc::pipelines::{Termination, Transcript};
use findoc::runner::{bench, build_indices, rerun, BenchOptions, Manifest, RunnerError};

#[test]
fn dscr_two_rounds_complete_and_score() {
    let work = tempfile::tempdir().unwrap();
    let config = common::dscr_config(work.path());
    assert_eq!(build_indices(&config, false).unwrap().len(), 1);

    let out = bench(&config, &BenchOptions::default()).unwrap();
    assert_eq!(out.questions, 1);
    assert_eq!(out.report.em, 100.0);
    assert_eq!(out.report.tol_acc, 100.0);

    let text = fs::read_to_string(out.run_dir.join("transcripts/dscr-1.json")).unwrap();
    let t: Transcript = serde_json::from_str(&text).unwrap();
    assert_eq!(t.termination, Termination::Complete);
    assert_eq!(t.rounds.len(), 2);
    assert_eq!(t.final_answer, "1.5");
    // the principal-repayment note is only found after evaluator feedback
    assert!(!t.rounds[0].context_pages.contains(&17));
    assert!(t.rounds[1].new_pages.contains(&17));
    assert_eq!(t.rounds[1].expansion_feedback[0].name, "principal repayments");
    for name in ["manifest.json", "predictions.jsonl", "scores.jsonl", "eval_report.json"] {
        assert!(out.run_dir.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn rerun_from_manifest_reproduces_scores() {
    let work = tempfile::tempdir().unwrap();
    let config = common::dscr_config(work.path());
    build_indices(&config, false).unwrap();
    let first = bench(&config, &BenchOptions { run_id: Some("first".into()), limit: None }).unwrap();
    let manifest_path = first.run_dir.join("manifest.json");
    let manifest = Manifest::load(&manifest_path).unwrap();
    assert_eq!(manifest.config, config);
    assert_eq!(manifest.models.chat, config.provider.model);
    assert_eq!(manifest.inputs.dataset_sha256, common::sha256_file(&config.paths.dataset));
    assert!(manifest.inputs.script_sha256.is_some());

    let second = rerun(&manifest_path, Some("second".into())).unwrap();
    assert_eq!(
        common::sha256_file(&first.run_dir.join("scores.jsonl")),
        common::sha256_file(&second.run_dir.join("scores.jsonl"))
    );
    assert_eq!(
        fs::read(first.run_dir.join("transcripts/dscr-1.json")).unwrap(),
        fs::read(second.run_dir.join("transcripts/dscr-1.json")).unwrap()
    );
}

#[test]
fn rerun_refuses_changed_inputs() {
    let work = tempfile::tempdir().unwrap();
    let mut config = common::dscr_config(work.path());
    let dataset = work.path().join("dataset.jsonl");
    fs::copy(&config.paths.dataset, &dataset).unwrap();
    config.paths.dataset = dataset.clone();
    build_indices(&config, false).unwrap();
    let run = bench(&config, &BenchOptions::default()).unwrap();
    let mut text = fs::read_to_string(&dataset).unwrap();
    text = text.replace("\"1.5\"", "\"1.6\"");
    fs::write(&dataset, text).unwrap();
    match rerun(&run.run_dir.join("manifest.json"), None) {
        Err(RunnerError::Data(m)) => assert!(m.contains("dataset changed"), "{m}"),
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn bench_without_index_is_data_error() {
    let work = tempfile::tempdir().unwrap();
    let config = common::dscr_config(work.path());
    let err = bench(&config, &BenchOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("findoc index"));
}
