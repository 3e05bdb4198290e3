use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::indices::load_retriever;
use super::{BackendKind, PipelineKind, RunConfig, RunnerError};
use crate::corpus::{load_reports, read_dataset, QAInstance, Report};
use crate::http::UreqTransport;
use crate::llm::{HttpChatBackend, LlmClient, ResponseCache, ScriptedBackend};
use crate::metrics::{aggregate, score_instance, EvalReport, InstanceScore, MetricConstants, ScoreInput};
use crate::pipelines::{run_agent, run_baseline, BaselineInput, Termination, Transcript};
use crate::retrieval::Retriever;

pub const MANIFEST_FORMAT: &str = "findoc-run-manifest/1";

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_sha256(path: &Path) -> Result<String, RunnerError> {
    fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| RunnerError::io(path, e))
}

/// Chat client for the configured backend, plus the cache it writes to.
///
/// Only a directory-backed cache is attached. An in-memory cache shared by
/// parallel workers would make cache-hit counts depend on scheduling.
pub fn build_llm(config: &RunConfig) -> Result<(LlmClient, Option<Arc<ResponseCache>>), RunnerError> {
    let client = match config.backend.kind {
        BackendKind::Scripted => {
            let path = config
                .backend
                .script
                .as_ref()
                .ok_or_else(|| RunnerError::Config("the scripted backend needs backend.script".into()))?;
            let backend = ScriptedBackend::from_file(path).map_err(|e| RunnerError::Config(e.to_string()))?;
            LlmClient::new(config.provider.clone(), Arc::new(backend))
        }
        BackendKind::Http => LlmClient::new(
            config.provider.clone(),
            Arc::new(HttpChatBackend::new(Arc::new(UreqTransport::new()))),
        ),
    };
    match &config.paths.cache_dir {
        Some(dir) => {
            let cache = Arc::new(ResponseCache::open(dir).map_err(|e| RunnerError::Config(e.to_string()))?);
            Ok((client.with_cache(cache.clone()), Some(cache)))
        }
        None => Ok((client, None)),
    }
}

/// Answers one question with the configured pipeline.
pub fn answer_question(
    config: &RunConfig,
    question_id: &str,
    question: &str,
    report: Option<&Report>,
    index: Option<&dyn Retriever>,
    llm: &LlmClient,
) -> Transcript {
    match config.baseline() {
        None => match index {
            Some(index) => run_agent(question_id, question, index, llm, &config.agent),
            None => Transcript {
                question_id: question_id.to_string(),
                question: question.to_string(),
                pipeline: "agent".into(),
                rounds: Vec::new(),
                final_answer: "0".into(),
                termination: Termination::Aborted,
                error: Some("the agent needs a retrieval index".into()),
                wall_time_ms: None,
                usage: Default::default(),
            },
        },
        Some(kind) => run_baseline(
            kind,
            question_id,
            question,
            BaselineInput { report, index },
            llm,
            &config.agent,
        ),
    }
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination: Option<Termination>,
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, RunnerError> {
    let text = fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(line)
            .map_err(|e| RunnerError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if !seen.insert(p.id.clone()) {
            return Err(RunnerError::Data(format!(
                "{}:{}: duplicate prediction for {:?}",
                path.display(),
                i + 1,
                p.id
            )));
        }
        out.push(p);
    }
    Ok(out)
}

/// Scores predictions against the dataset, in dataset order. A question
/// without a prediction is scored as an empty answer; predictions for
/// unknown ids are ignored with a warning.
pub fn score_predictions(
    predictions: &[Prediction],
    gold: &[QAInstance],
    constants: &MetricConstants,
) -> Result<(Vec<InstanceScore>, EvalReport), RunnerError> {
    let by_id: BTreeMap<&str, &str> = predictions
        .iter()
        .map(|p| (p.id.as_str(), p.prediction.as_str()))
        .collect();
    let known: BTreeSet<&str> = gold.iter().map(|g| g.id.as_str()).collect();
    for p in predictions {
        if !known.contains(p.id.as_str()) {
            log::warn!("prediction for unknown question {:?} ignored", p.id);
        }
    }
    let scores: Vec<InstanceScore> = gold
        .iter()
        .map(|g| {
            score_instance(
                &ScoreInput {
                    id: &g.id,
                    prediction: by_id.get(g.id.as_str()).copied().unwrap_or(""),
                    gold: &g.gold_answer,
                    percent_flag: g.percent_mode,
                    difficulty: g.difficulty,
                    question_type: g.question_type,
                },
                constants,
            )
        })
        .collect();
    let report = aggregate(&scores).map_err(|e| RunnerError::Data(e.to_string()))?;
    Ok((scores, report))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunnerError> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row).expect("row serializes");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| RunnerError::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunnerError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| RunnerError::io(path, e))
}

/// Writes `scores.jsonl` and `eval_report.json` into `dir`.
pub fn write_scores(dir: &Path, scores: &[InstanceScore], report: &EvalReport) -> Result<(), RunnerError> {
    fs::create_dir_all(dir).map_err(|e| RunnerError::io(dir, e))?;
    write_jsonl(&dir.join("scores.jsonl"), scores)?;
    write_json(&dir.join("eval_report.json"), &report.to_json())
}

/// File-name-safe form of a question id.
pub fn transcript_file_name(question_id: &str) -> String {
    let safe: String = question_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect();
    format!("{safe}.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIds {
    pub chat: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHashes {
    pub dataset: PathBuf,
    pub dataset_sha256: String,
    /// SHA-256 over the sorted `(report_id, report sha256)` list.
    pub corpus_sha256: String,
    pub reports: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheState {
    pub dir: Option<PathBuf>,
    pub entries_before: usize,
    pub entries_after: usize,
}

/// Everything needed to re-execute a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub run_id: String,
    pub created_unix: u64,
    pub version: String,
    pub config: RunConfig,
    pub models: ModelIds,
    pub inputs: InputHashes,
    pub cache: CacheState,
    /// Only the first `limit` questions were run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    pub questions: usize,
    pub terminations: BTreeMap<String, usize>,
    pub scores_sha256: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| RunnerError::Data(format!("{} is not a run manifest: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(RunnerError::Data(format!(
                "{}: unsupported manifest format {:?}",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Default)]
pub struct BenchOptions {
    /// Directory name under `paths.output`; a timestamp when unset.
    pub run_id: Option<String>,
    /// Run only the first `limit` dataset questions.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub report: EvalReport,
    pub terminations: BTreeMap<String, usize>,
    pub aborted: usize,
    pub questions: usize,
}

fn termination_name(t: Termination) -> String {
    serde_json::to_value(t)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Creates the run directory. An explicit id must be new; a generated one
/// gets a numeric suffix when the timestamp is already taken.
fn create_run_dir(output: &Path, run_id: Option<&str>) -> Result<(String, PathBuf), RunnerError> {
    fs::create_dir_all(output).map_err(|e| RunnerError::io(output, e))?;
    if let Some(id) = run_id {
        if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
            return Err(RunnerError::Config(format!("invalid run id {id:?}")));
        }
        let dir = output.join(id);
        return match fs::create_dir(&dir) {
            Ok(()) => Ok((id.to_string(), dir)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(RunnerError::Config(format!(
                "run directory {} already exists",
                dir.display()
            ))),
            Err(e) => Err(RunnerError::io(&dir, e)),
        };
    }
    let stamp = now_unix().to_string();
    for n in 0.. {
        let id = if n == 0 { stamp.clone() } else { format!("{stamp}-{n}") };
        let dir = output.join(&id);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok((id, dir)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(RunnerError::io(&dir, e)),
        }
    }
    unreachable!("some suffix is always free")
}

fn report_hashes(reports: &[Report]) -> (BTreeMap<String, String>, String) {
    let hashes: BTreeMap<String, String> = reports
        .iter()
        .map(|r| (r.report_id.clone(), sha256_hex(r.to_markdown().as_bytes())))
        .collect();
    let mut h = Sha256::new();
    for (id, digest) in &hashes {
        h.update(id.as_bytes());
        h.update([0u8]);
        h.update(digest.as_bytes());
        h.update([b'\n']);
    }
    (hashes, hex::encode(h.finalize()))
}

struct Inputs {
    reports: Vec<Report>,
    instances: Vec<QAInstance>,
    hashes: InputHashes,
}

fn load_inputs(config: &RunConfig, limit: Option<usize>) -> Result<Inputs, RunnerError> {
    let delimiter = config.page_delimiter()?;
    let dataset_path = &config.paths.dataset;
    let mut instances = read_dataset(dataset_path)?;
    if let Some(n) = limit {
        instances.truncate(n);
    }
    if instances.is_empty() {
        return Err(RunnerError::Data(format!("{} holds no questions", dataset_path.display())));
    }
    let mut ids = BTreeSet::new();
    for inst in &instances {
        if !ids.insert(transcript_file_name(&inst.id)) {
            return Err(RunnerError::Data(format!("duplicate question id {:?}", inst.id)));
        }
    }
    let reports = load_reports(&config.paths.corpus, &delimiter)?;
    let known: BTreeSet<&str> = reports.iter().map(|r| r.report_id.as_str()).collect();
    if let Some(inst) = instances.iter().find(|i| !known.contains(i.report_id.as_str())) {
        return Err(RunnerError::Data(format!(
            "question {:?} refers to report {:?}, which is not in {}",
            inst.id,
            inst.report_id,
            config.paths.corpus.display()
        )));
    }
    let (reports_h, corpus_sha256) = report_hashes(&reports);
    let script_sha256 = match (&config.backend.kind, &config.backend.script) {
        (BackendKind::Scripted, Some(p)) => Some(file_sha256(p)?),
        _ => None,
    };
    Ok(Inputs {
        hashes: InputHashes {
            dataset: dataset_path.clone(),
            dataset_sha256: file_sha256(dataset_path)?,
            corpus_sha256,
            reports: reports_h,
            script_sha256,
        },
        reports,
        instances,
    })
}

/// Runs every dataset question through the configured pipeline and writes
/// `{output}/{run_id}/`:
///
/// - `manifest.json`: the validated config, model ids, input hashes, cache state
/// - `transcripts/{question_id}.json`
/// - `predictions.jsonl`, `scores.jsonl`, `eval_report.json`
///
/// Questions run in parallel on `workers` threads; all files are written in
/// dataset order, so outputs do not depend on scheduling.
pub fn bench(config: &RunConfig, opts: &BenchOptions) -> Result<BenchOutcome, RunnerError> {
    config.validate()?;
    let inputs = load_inputs(config, opts.limit)?;
    let (llm, cache) = build_llm(config)?;

    let needed: BTreeSet<&str> = inputs.instances.iter().map(|i| i.report_id.as_str()).collect();
    let mut indices: BTreeMap<&str, Box<dyn Retriever>> = BTreeMap::new();
    if config.pipeline.needs_index() {
        for id in &needed {
            indices.insert(id, load_retriever(id, config)?);
        }
    }
    let reports: BTreeMap<&str, &Report> = inputs.reports.iter().map(|r| (r.report_id.as_str(), r)).collect();

    let (run_id, run_dir) = create_run_dir(&config.paths.output, opts.run_id.as_deref())?;
    let transcripts_dir = run_dir.join("transcripts");
    fs::create_dir_all(&transcripts_dir).map_err(|e| RunnerError::io(&transcripts_dir, e))?;
    let entries_before = cache.as_ref().map_or(0, |c| c.len());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| RunnerError::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<Transcript, RunnerError>> = pool.install(|| {
        inputs
            .instances
            .par_iter()
            .map(|inst| {
                let report = reports.get(inst.report_id.as_str()).copied();
                let index = indices.get(inst.report_id.as_str()).map(|b| b.as_ref());
                let t = answer_question(config, &inst.id, &inst.question, report, index, &llm);
                let path = transcripts_dir.join(transcript_file_name(&inst.id));
                fs::write(&path, t.to_json() + "\n").map_err(|e| RunnerError::io(&path, e))?;
                Ok(t)
            })
            .collect()
    });
    let transcripts = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let predictions: Vec<Prediction> = transcripts
        .iter()
        .map(|t| Prediction {
            id: t.question_id.clone(),
            prediction: t.final_answer.clone(),
            termination: Some(t.termination),
        })
        .collect();
    write_jsonl(&run_dir.join("predictions.jsonl"), &predictions)?;
    let (scores, report) = score_predictions(&predictions, &inputs.instances, &config.metrics)?;
    write_scores(&run_dir, &scores, &report)?;

    let mut terminations = BTreeMap::new();
    for t in &transcripts {
        *terminations.entry(termination_name(t.termination)).or_insert(0) += 1;
    }
    let aborted = transcripts.iter().filter(|t| t.termination == Termination::Aborted).count();
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        run_id: run_id.clone(),
        created_unix: now_unix(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        models: ModelIds {
            chat: config.provider.model.clone(),
            embedding: (config.pipeline.needs_index() && config.agent.index == crate::pipelines::IndexKind::Dense)
                .then(|| super::indices::embedder(config).map(|e| e.model_id().to_string()))
                .transpose()?,
        },
        inputs: inputs.hashes,
        cache: CacheState {
            dir: cache.as_ref().and_then(|c| c.dir().map(Path::to_path_buf)),
            entries_before,
            entries_after: cache.as_ref().map_or(0, |c| c.len()),
        },
        limit: opts.limit,
        questions: transcripts.len(),
        terminations: terminations.clone(),
        scores_sha256: file_sha256(&run_dir.join("scores.jsonl"))?,
    };
    write_json(&run_dir.join("manifest.json"), &manifest)?;
    log::info!("run {run_id}: {} questions, EM {:.2}", transcripts.len(), report.em);

    Ok(BenchOutcome {
        run_id,
        run_dir,
        report,
        terminations,
        aborted,
        questions: transcripts.len(),
    })
}

/// Re-executes the run described by `manifest_path` into a new run
/// directory. Refuses when the dataset, corpus or script no longer hash to
/// the recorded values.
pub fn rerun(manifest_path: &Path, run_id: Option<String>) -> Result<BenchOutcome, RunnerError> {
    let m = Manifest::load(manifest_path)?;
    m.config.validate()?;
    let current = load_inputs(&m.config, m.limit)?.hashes;
    let check = |what: &str, then: &str, now: &str| {
        if then == now {
            Ok(())
        } else {
            Err(RunnerError::Data(format!(
                "{what} changed since run {} (recorded {then}, now {now})",
                m.run_id
            )))
        }
    };
    check("dataset", &m.inputs.dataset_sha256, &current.dataset_sha256)?;
    check("corpus", &m.inputs.corpus_sha256, &current.corpus_sha256)?;
    check(
        "backend script",
        m.inputs.script_sha256.as_deref().unwrap_or(""),
        current.script_sha256.as_deref().unwrap_or(""),
    )?;
    bench(&m.config, &BenchOptions { run_id, limit: m.limit })
}

/// Result of [`ask`].
#[derive(Debug, Clone)]
pub struct AskOutcome {
    pub transcript: Transcript,
    pub transcript_path: PathBuf,
}

/// Runs one ad-hoc question against one report and saves the transcript
/// under `{output}/ask/`.
pub fn ask(config: &RunConfig, report_id: &str, question: &str) -> Result<AskOutcome, RunnerError> {
    config.validate()?;
    if question.trim().is_empty() {
        return Err(RunnerError::Data("the question is empty".into()));
    }
    let index = if config.pipeline.needs_index() {
        Some(load_retriever(report_id, config)?)
    } else {
        None
    };
    let report = if config.pipeline == PipelineKind::LongContext {
        let delimiter = config.page_delimiter()?;
        let path = config.paths.corpus.join(format!("{report_id}.md"));
        if !path.is_file() {
            return Err(RunnerError::Data(format!("report {report_id:?} not found at {}", path.display())));
        }
        Some(crate::corpus::load_report(&path, &delimiter)?)
    } else {
        None
    };
    let (llm, _) = build_llm(config)?;
    let qid = format!(
        "ask-{}",
        &sha256_hex(format!("{report_id}\n{question}").as_bytes())[..12]
    );
    let transcript = answer_question(config, &qid, question, report.as_ref(), index.as_deref(), &llm);
    let dir = config.paths.output.join("ask");
    fs::create_dir_all(&dir).map_err(|e| RunnerError::io(&dir, e))?;
    let path = dir.join(transcript_file_name(&qid));
    let mut f = fs::File::create(&path).map_err(|e| RunnerError::io(&path, e))?;
    f.write_all((transcript.to_json() + "\n").as_bytes())
        .map_err(|e| RunnerError::io(&path, e))?;
    Ok(AskOutcome {
        transcript,
        transcript_path: path,
    })
}

/// Builds the index of every corpus report that has none yet (or all of
/// them with `rebuild`). Returns the paths written.
pub fn build_indices(config: &RunConfig, rebuild: bool) -> Result<Vec<PathBuf>, RunnerError> {
    config.validate()?;
    let reports = load_reports(&config.paths.corpus, &config.page_delimiter()?)?;
    if reports.is_empty() {
        return Err(RunnerError::Data(format!(
            "no .md reports in {}",
            config.paths.corpus.display()
        )));
    }
    let mut written = Vec::new();
    for r in &reports {
        if !rebuild && super::indices::index_exists(config, &r.report_id) {
            continue;
        }
        written.push(super::indices::write_index(r, config)?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Difficulty, QuestionType};

    fn inst(id: &str, gold: &str) -> QAInstance {
        crate::corpus::parse_dataset(&format!(
            r#"{{"id":"{id}","report_id":"r_2023","company":"r","year":2023,"question":"q?","answer":"{gold}","type":"table","page_numbers":[1,2],"thoughts":"","python_code":""}}"#
        ))
        .unwrap()
        .remove(0)
    }

    #[test]
    fn all_correct_scores_100() {
        let gold = vec![inst("a", "1.5"), inst("b", "(1,234)"), inst("c", "12%")];
        let preds: Vec<Prediction> = gold
            .iter()
            .map(|g| Prediction {
                id: g.id.clone(),
                prediction: g.gold_answer.clone(),
                termination: None,
            })
            .collect();
        let (scores, report) = score_predictions(&preds, &gold, &MetricConstants::default()).unwrap();
        assert_eq!(scores.len(), 3);
        assert_eq!(report.em, 100.0);
        assert_eq!(report.tol_acc, 100.0);
        assert_eq!(report.per_type[&QuestionType::Table].count, 3);
        assert_eq!(report.per_difficulty[&Difficulty::Easy].count, 3);
    }

    #[test]
    fn missing_prediction_scores_as_empty() {
        let gold = vec![inst("a", "1.5"), inst("b", "2")];
        let preds = vec![Prediction {
            id: "a".into(),
            prediction: "1.5".into(),
            termination: None,
        }];
        let (scores, report) = score_predictions(&preds, &gold, &MetricConstants::default()).unwrap();
        assert_eq!(scores[1].em, 0);
        assert_eq!(report.em, 50.0);
    }

    #[test]
    fn duplicate_predictions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        fs::write(&p, "{\"id\":\"a\",\"prediction\":\"1\"}\n{\"id\":\"a\",\"prediction\":\"2\"}\n").unwrap();
        assert!(matches!(read_predictions(&p), Err(RunnerError::Data(_))));
    }

    #[test]
    fn file_names_are_safe() {
        assert_eq!(transcript_file_name("q/1 a"), "q_1_a.json");
        assert_eq!(transcript_file_name("abc-1.2"), "abc-1.2.json");
    }

    #[test]
    fn run_dirs_do_not_collide() {
        let dir = tempfile::tempdir().unwrap();
        let (a, _) = create_run_dir(dir.path(), None).unwrap();
        let (b, _) = create_run_dir(dir.path(), None).unwrap();
        assert_ne!(a, b);
        create_run_dir(dir.path(), Some("x")).unwrap();
        assert!(matches!(create_run_dir(dir.path(), Some("x")), Err(RunnerError::Config(_))));
        assert!(create_run_dir(dir.path(), Some("../x")).is_err());
    }
}
