use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::Value;

use super::bench::{build_llm, write_json};
use super::{RunConfig, RunnerError};
use crate::corpus::{corpus_stats, load_reports, read_dataset, report_key, write_dataset, CorpusStats, Report};
use crate::datagen::{filter_pipeline, generate_corpus, FilterStats, RawQA};
use crate::http::HttpTransport;
use crate::ingest::{fetch_all, html_to_pages_with, list_filings, EdgarClient, FilingRef, IngestError};
use crate::pipelines::IndexKind;
use crate::retrieval::{ablate_chunks, AblationTable, SparseScheme};

impl From<IngestError> for RunnerError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Transport(_) | IngestError::RateLimited { .. } | IngestError::Status { .. } => {
                RunnerError::Provider(e.to_string())
            }
            IngestError::MissingUserAgent => RunnerError::Config(e.to_string()),
            IngestError::Io { path, source } => RunnerError::Io { path, source },
            IngestError::NotFound(_) | IngestError::Decode { .. } | IngestError::ChecksumMismatch { .. } => {
                RunnerError::Data(e.to_string())
            }
        }
    }
}

fn load_corpus(config: &RunConfig) -> Result<Vec<Report>, RunnerError> {
    let reports = load_reports(&config.paths.corpus, &config.page_delimiter()?)?;
    if reports.is_empty() {
        return Err(RunnerError::Data(format!(
            "no .md reports in {}",
            config.paths.corpus.display()
        )));
    }
    Ok(reports)
}

/// What to fetch from EDGAR.
#[derive(Debug, Clone)]
pub struct IngestRequest {
    /// Tickers or CIKs.
    pub companies: Vec<String>,
    pub form_type: String,
    pub years: RangeInclusive<i32>,
    /// Convert HTML primary documents into corpus reports.
    pub convert: bool,
}

#[derive(Debug, Default)]
pub struct IngestOutcome {
    pub filings: Vec<FilingRef>,
    pub downloaded: Vec<PathBuf>,
    /// Corpus files written by the HTML conversion.
    pub reports: Vec<PathBuf>,
    /// Per-company or per-document failures; the rest still completed.
    pub errors: Vec<RunnerError>,
}

/// Lists and downloads filings into `paths.filings`, optionally converting
/// each HTML document into `{corpus}/{company_slug}_{year}.md`.
pub fn run_ingest(
    config: &RunConfig,
    transport: Arc<dyn HttpTransport>,
    req: &IngestRequest,
) -> Result<IngestOutcome, RunnerError> {
    let client = EdgarClient::new(transport, config.edgar.clone())?;
    let mut out = IngestOutcome::default();
    for company in &req.companies {
        match list_filings(&client, company, &req.form_type, req.years.clone()) {
            Ok(mut refs) => out.filings.append(&mut refs),
            Err(e) => out.errors.push(e.into()),
        }
    }
    let dest = &config.paths.filings;
    let results = fetch_all(&client, &out.filings, dest);
    for (filing, result) in out.filings.iter().zip(results) {
        let path = match result {
            Ok(p) => p,
            Err(e) => {
                out.errors.push(e.into());
                continue;
            }
        };
        out.downloaded.push(path.clone());
        let is_html = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "htm" | "html"));
        if req.convert && is_html {
            match convert_filing(config, filing, &path) {
                Ok(p) => out.reports.push(p),
                Err(e) => out.errors.push(e),
            }
        }
    }
    Ok(out)
}

fn convert_filing(config: &RunConfig, filing: &FilingRef, path: &Path) -> Result<PathBuf, RunnerError> {
    let bytes = fs::read(path).map_err(|e| RunnerError::io(path, e))?;
    let html = String::from_utf8_lossy(&bytes);
    let mut report = html_to_pages_with(&html, &config.html);
    report.company = filing.company_name.clone();
    report.fiscal_year = filing.fiscal_year;
    report.report_id = report_key(&filing.company_name, filing.fiscal_year);
    let dir = &config.paths.corpus;
    fs::create_dir_all(dir).map_err(|e| RunnerError::io(dir, e))?;
    let dest = dir.join(format!("{}.md", report.report_id));
    fs::write(&dest, report.to_markdown()).map_err(|e| RunnerError::io(&dest, e))?;
    Ok(dest)
}

#[derive(Debug, Clone)]
pub struct DatagenOutcome {
    pub stats: FilterStats,
    /// Candidate elements that were not valid records at all.
    pub undecodable: usize,
    /// Reports whose generation call failed.
    pub failed_reports: Vec<String>,
    pub dataset_path: PathBuf,
}

fn read_candidates(path: &Path) -> Result<(Vec<RawQA>, usize), RunnerError> {
    let text = fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))?;
    let mut items = Vec::new();
    let mut bad = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<Value>(line).ok().as_ref().and_then(RawQA::from_value) {
            Some(qa) => items.push(qa),
            None => bad += 1,
        }
    }
    Ok((items, bad))
}

/// Generates candidates for every corpus report (or reads them from
/// `candidates`), filters them and writes into `out_dir`:
/// `candidates.jsonl`, `dataset.jsonl`, `filter_outcomes.jsonl` and
/// `filter_report.json`.
pub fn run_datagen(config: &RunConfig, out_dir: &Path, candidates: Option<&Path>) -> Result<DatagenOutcome, RunnerError> {
    config.validate()?;
    let reports = load_corpus(config)?;
    let mut failed_reports = Vec::new();
    let (raw, undecodable) = match candidates {
        Some(path) => read_candidates(path)?,
        None => {
            let (llm, _) = build_llm(config)?;
            let batches = generate_corpus(
                &reports,
                &llm,
                config.datagen.sample_pages,
                config.datagen.max_pairs,
                config.seed,
            );
            let mut items = Vec::new();
            let mut bad = 0;
            let mut first_error = None;
            for (report, batch) in reports.iter().zip(batches) {
                match batch {
                    Ok(b) => {
                        bad += b.parse_errors;
                        items.extend(b.items);
                    }
                    Err(e) => {
                        log::warn!("generation failed for {}: {e}", report.report_id);
                        failed_reports.push(report.report_id.clone());
                        first_error.get_or_insert(e);
                    }
                }
            }
            if failed_reports.len() == reports.len() {
                let e = first_error.expect("every report failed");
                return Err(RunnerError::Provider(e.to_string()));
            }
            (items, bad)
        }
    };

    fs::create_dir_all(out_dir).map_err(|e| RunnerError::io(out_dir, e))?;
    if candidates.is_none() {
        let path = out_dir.join("candidates.jsonl");
        let mut buf = String::new();
        for qa in &raw {
            buf.push_str(&serde_json::to_string(qa).expect("record serializes"));
            buf.push('\n');
        }
        fs::write(&path, buf).map_err(|e| RunnerError::io(&path, e))?;
    }
    let run = filter_pipeline(&raw, &reports, &config.metrics);
    let dataset_path = out_dir.join("dataset.jsonl");
    write_dataset(&run.kept, &dataset_path)?;
    let outcomes_path = out_dir.join("filter_outcomes.jsonl");
    let mut buf = String::new();
    for o in &run.outcomes {
        buf.push_str(&serde_json::to_string(o).expect("outcome serializes"));
        buf.push('\n');
    }
    fs::write(&outcomes_path, buf).map_err(|e| RunnerError::io(&outcomes_path, e))?;
    write_json(
        &out_dir.join("filter_report.json"),
        &serde_json::json!({
            "stages": run.stats.to_report_json(),
            "undecodable_elements": undecodable,
            "failed_reports": failed_reports,
            "seed": config.seed,
            "sample_pages": config.datagen.sample_pages,
            "max_pairs": config.datagen.max_pairs,
        }),
    )?;
    Ok(DatagenOutcome {
        stats: run.stats,
        undecodable,
        failed_reports,
        dataset_path,
    })
}

/// Corpus statistics, with question statistics when `with_dataset` is set.
pub fn run_stats(config: &RunConfig, with_dataset: bool) -> Result<CorpusStats, RunnerError> {
    let reports = load_corpus(config)?;
    let instances = if with_dataset {
        read_dataset(&config.paths.dataset)?
    } else {
        Vec::new()
    };
    Ok(corpus_stats(&reports, &instances)?)
}

/// Chunk-granularity study over the corpus and dataset with the configured
/// sparse scheme.
pub fn run_ablation(config: &RunConfig, sizes: &[usize], k_values: &[usize]) -> Result<AblationTable, RunnerError> {
    let scheme = match config.agent.index {
        IndexKind::Bm25 => SparseScheme::Bm25,
        IndexKind::Tfidf => SparseScheme::Tfidf,
        IndexKind::Dense => {
            return Err(RunnerError::Config(
                "the granularity ablation runs on a sparse index; set agent.index to bm25 or tfidf".into(),
            ))
        }
    };
    if sizes.contains(&0) || k_values.is_empty() || k_values.contains(&0) {
        return Err(RunnerError::Config("chunk sizes and k values must be positive".into()));
    }
    let reports = load_corpus(config)?;
    let instances = read_dataset(&config.paths.dataset)?;
    ablate_chunks(&reports, &instances, sizes, k_values, scheme).map_err(|e| RunnerError::Data(e.to_string()))
}
