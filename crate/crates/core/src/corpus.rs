//! Reports, the QA dataset and corpus statistics.
//!
//! A report is a Markdown document split into pages by delimiter lines such as
//! `<!-- page 12 -->`. The dataset is JSON lines, one QA record per line, with
//! the keys produced by the generation prompt (`id`, `company`, `year`,
//! `question`, `type`, `thoughts`, `page_numbers`, `python_code`, `answer`).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::metrics::{bucket_difficulty, normalize_answer, Difficulty, PercentMode, QuestionType};

/// Default page delimiter: a standalone `<!-- page N -->` line.
pub const DEFAULT_DELIMITER: &str = r"^[ \t]*<!--[ \t]*[Pp]age[ \t]*:?[ \t]*(\d+)[ \t]*-->[ \t]*\r?$";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("document has no non-whitespace content")]
    EmptyDocument,
    #[error("page number {0} appears more than once")]
    DuplicatePageNumber(u32),
    #[error("invalid page delimiter pattern: {0}")]
    InvalidDelimiter(String),
    #[error("delimiter captured {0:?}, which is not a positive page number")]
    InvalidPageNumber(String),
    #[error("dataset line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("instance {instance} references unknown report {report_id}")]
    DanglingReference { instance: String, report_id: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Token counting scheme. Only whitespace runs are implemented; the
/// identifier is recorded in statistics output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenScheme {
    #[default]
    WhitespaceRuns,
}

/// Number of maximal runs of non-whitespace characters.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageChunk {
    pub page_number: u32,
    pub text: String,
    pub token_count: usize,
    /// Byte ranges `[start, end)` of Markdown table blocks within `text`.
    pub table_block_spans: Vec<(usize, usize)>,
}

impl PageChunk {
    pub fn new(page_number: u32, text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            page_number,
            token_count: count_tokens(&text),
            table_block_spans: detect_tables(&text),
            text,
        }
    }

    pub fn tables(&self) -> impl Iterator<Item = &str> {
        self.table_block_spans.iter().map(|&(s, e)| &self.text[s..e])
    }
}

/// Maximal runs of lines whose first non-blank character is `|`.
///
/// Each span starts at the `|` of its first row and ends at the end of its
/// last row (line terminator excluded).
pub fn detect_tables(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        let indent = content.len() - content.trim_start_matches([' ', '\t']).len();
        if content[indent..].starts_with('|') {
            let end = offset + content.len();
            current = Some(match current {
                Some((s, _)) => (s, end),
                None => (offset + indent, end),
            });
        } else if let Some(span) = current.take() {
            spans.push(span);
        }
        offset += line.len();
    }
    spans.extend(current);
    spans
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub report_id: String,
    pub company: String,
    pub fiscal_year: i32,
    pub pages: Vec<PageChunk>,
}

impl Report {
    pub fn page(&self, number: u32) -> Option<&PageChunk> {
        self.pages
            .binary_search_by_key(&number, |p| p.page_number)
            .ok()
            .map(|i| &self.pages[i])
    }

    pub fn page_numbers(&self) -> Vec<u32> {
        self.pages.iter().map(|p| p.page_number).collect()
    }

    pub fn token_count(&self) -> usize {
        self.pages.iter().map(|p| p.token_count).sum()
    }

    /// Serializes back to page-delimited Markdown using the default delimiter.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        for p in &self.pages {
            out.push_str(&format!("<!-- page {} -->\n{}\n", p.page_number, p.text));
        }
        out
    }

    /// Page bodies joined by newlines.
    pub fn body(&self) -> String {
        self.pages.iter().map(|p| p.text.as_str()).collect::<Vec<_>>().join("\n")
    }
}

/// A compiled page delimiter.
#[derive(Debug, Clone)]
pub struct PageDelimiter {
    regex: Regex,
    numbered: bool,
}

impl PageDelimiter {
    /// `pattern` is matched in multi-line mode. It must have one capture group
    /// holding the page number, or none for sequential numbering.
    pub fn new(pattern: &str) -> Result<Self, CorpusError> {
        let regex = Regex::new(&format!("(?m){pattern}"))
            .map_err(|e| CorpusError::InvalidDelimiter(e.to_string()))?;
        let groups = regex.captures_len() - 1;
        if groups > 1 {
            return Err(CorpusError::InvalidDelimiter(format!(
                "expected at most one capture group, found {groups}"
            )));
        }
        Ok(Self {
            regex,
            numbered: groups == 1,
        })
    }
}

impl Default for PageDelimiter {
    fn default() -> Self {
        Self::new(DEFAULT_DELIMITER).expect("default delimiter compiles")
    }
}

fn strip_one_leading_newline(s: &str) -> &str {
    s.strip_prefix("\r\n").or_else(|| s.strip_prefix('\n')).unwrap_or(s)
}

fn strip_one_trailing_newline(s: &str) -> &str {
    s.strip_suffix("\r\n").or_else(|| s.strip_suffix('\n')).unwrap_or(s)
}

/// Splits page-delimited Markdown into a [`Report`].
///
/// The body of a page is the text between its delimiter line and the next,
/// minus the line break that ends the delimiter line and the one that
/// precedes the next delimiter. Content before the first delimiter is
/// prepended to the first page. Without any delimiter match the whole text
/// becomes page 1. The report id is a content hash; callers that know the
/// filing identity overwrite the metadata fields.
pub fn parse_report(text: &str, delimiter: &PageDelimiter) -> Result<Report, CorpusError> {
    if text.trim().is_empty() {
        return Err(CorpusError::EmptyDocument);
    }
    let matches: Vec<regex::Captures> = delimiter.regex.captures_iter(text).collect();
    let mut pages = Vec::new();
    if matches.is_empty() {
        pages.push(PageChunk::new(1, text));
    } else {
        let preamble = &text[..matches[0].get(0).unwrap().start()];
        for (i, caps) in matches.iter().enumerate() {
            let whole = caps.get(0).unwrap();
            let number = if delimiter.numbered {
                let raw = caps.get(1).map(|m| m.as_str()).unwrap_or("");
                match raw.parse::<u32>() {
                    Ok(n) if n > 0 => n,
                    _ => return Err(CorpusError::InvalidPageNumber(raw.to_string())),
                }
            } else {
                i as u32 + 1
            };
            let end = matches
                .get(i + 1)
                .map(|m| m.get(0).unwrap().start())
                .unwrap_or(text.len());
            let body = strip_one_trailing_newline(strip_one_leading_newline(&text[whole.end()..end]));
            let body = if i == 0 && !preamble.trim().is_empty() {
                format!("{}{}", preamble, body)
            } else {
                body.to_string()
            };
            pages.push(PageChunk::new(number, body));
        }
    }
    pages.sort_by_key(|p| p.page_number);
    for w in pages.windows(2) {
        if w[0].page_number == w[1].page_number {
            return Err(CorpusError::DuplicatePageNumber(w[0].page_number));
        }
    }
    Ok(Report {
        report_id: content_id(text),
        company: String::new(),
        fiscal_year: 0,
        pages,
    })
}

pub(crate) fn content_id(text: &str) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(text.as_bytes());
    format!("report-{}", &hex::encode(digest)[..12])
}

/// Canonical report id for a company and fiscal year, e.g. `acme_corp_2023`.
pub fn report_key(company: &str, year: i32) -> String {
    let mut slug = String::new();
    for c in company.chars() {
        if c.is_alphanumeric() {
            slug.extend(c.to_lowercase());
        } else if !slug.ends_with('_') && !slug.is_empty() {
            slug.push('_');
        }
    }
    let slug = slug.trim_end_matches('_');
    format!("{slug}_{year}")
}

/// Loads `path` as a report; the file stem becomes the report id.
pub fn load_report(path: &Path, delimiter: &PageDelimiter) -> Result<Report, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let mut report = parse_report(&text, delimiter)?;
    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
        report.report_id = stem.to_string();
        if let Some((company, year)) = stem.rsplit_once('_') {
            if let Ok(y) = year.parse() {
                report.fiscal_year = y;
                report.company = company.replace('_', " ");
            }
        }
    }
    Ok(report)
}

/// Loads every `.md` file in `dir` (sorted by file name).
pub fn load_reports(dir: &Path, delimiter: &PageDelimiter) -> Result<Vec<Report>, CorpusError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CorpusError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "md"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_report(p, delimiter)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAInstance {
    pub id: String,
    pub report_id: String,
    pub company: String,
    pub year: i32,
    pub question: String,
    pub gold_answer: String,
    pub question_type: QuestionType,
    pub evidence_pages: BTreeSet<u32>,
    pub program_source: String,
    pub reasoning_trace: String,
    pub n_evidence_tables: u32,
    pub difficulty: Difficulty,
    pub percent_mode: Option<PercentMode>,
    /// Keys not known to this schema, preserved for round trips.
    pub extras: Map<String, Value>,
}

impl QAInstance {
    pub fn set_evidence_tables(&mut self, n: u32) {
        self.n_evidence_tables = n;
        self.difficulty = bucket_difficulty(n);
    }
}

const KNOWN_KEYS: [&str; 13] = [
    "id",
    "company",
    "year",
    "question",
    "type",
    "thoughts",
    "page_numbers",
    "python_code",
    "answer",
    "report_id",
    "n_evidence_tables",
    "difficulty",
    "percent_mode",
];

struct Fields<'a> {
    line: usize,
    obj: &'a Map<String, Value>,
}

impl Fields<'_> {
    fn err(&self, message: impl Into<String>) -> CorpusError {
        CorpusError::Schema {
            line: self.line,
            message: message.into(),
        }
    }

    fn string(&self, key: &str) -> Result<String, CorpusError> {
        match self.obj.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(self.err(format!("field `{key}` must be a string"))),
            None => Err(self.err(format!("missing field `{key}`"))),
        }
    }

    /// Strings or numbers; numbers are rendered back to text.
    fn text_or_number(&self, key: &str) -> Result<String, CorpusError> {
        match self.obj.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Number(n)) => Ok(n.to_string()),
            Some(_) => Err(self.err(format!("field `{key}` must be a string or number"))),
            None => Err(self.err(format!("missing field `{key}`"))),
        }
    }
}

/// Decodes one dataset record. Exposed for raw generation batches too.
pub fn decode_instance(line: usize, obj: &Map<String, Value>) -> Result<QAInstance, CorpusError> {
    let f = Fields { line, obj };
    let id = f.text_or_number("id")?;
    let company = f.string("company")?;
    let year_text = f.text_or_number("year")?;
    let year: i32 = year_text
        .trim()
        .parse()
        .map_err(|_| f.err(format!("field `year` is not an integer: {year_text:?}")))?;
    let question = f.string("question")?;
    let type_text = f.string("type")?;
    let question_type = QuestionType::parse(&type_text)
        .ok_or_else(|| f.err(format!("field `type` must be table|text|mixed, got {type_text:?}")))?;
    let reasoning_trace = f.string("thoughts")?;
    let evidence_pages = match obj.get("page_numbers") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v.as_u64() {
                Some(n) if n > 0 && n <= u32::MAX as u64 => Ok(n as u32),
                _ => Err(f.err("field `page_numbers` must contain positive integers")),
            })
            .collect::<Result<BTreeSet<u32>, _>>()?,
        Some(_) => return Err(f.err("field `page_numbers` must be an array")),
        None => return Err(f.err("missing field `page_numbers`")),
    };
    let program_source = f.string("python_code")?;
    let gold_answer = f.text_or_number("answer")?;
    if normalize_answer(&gold_answer, PercentMode::AsGiven).value.is_none() {
        return Err(f.err(format!("field `answer` is not numeric: {gold_answer:?}")));
    }
    let report_id = match obj.get("report_id") {
        Some(_) => f.string("report_id")?,
        None => report_key(&company, year),
    };
    let n_evidence_tables = match obj.get("n_evidence_tables") {
        None => 0,
        Some(v) => v
            .as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .ok_or_else(|| f.err("field `n_evidence_tables` must be a non-negative integer"))?,
    };
    let percent_mode = match obj.get("percent_mode") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value(v.clone())
                .map_err(|_| f.err("field `percent_mode` must be as_given|fraction|percent"))?,
        ),
    };
    let extras = obj
        .iter()
        .filter(|(k, _)| !KNOWN_KEYS.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(QAInstance {
        id,
        report_id,
        company,
        year,
        question,
        gold_answer,
        question_type,
        evidence_pages,
        program_source,
        reasoning_trace,
        n_evidence_tables,
        difficulty: bucket_difficulty(n_evidence_tables),
        percent_mode,
        extras,
    })
}

pub fn encode_instance(inst: &QAInstance) -> Map<String, Value> {
    let mut obj = Map::new();
    obj.insert("id".into(), Value::String(inst.id.clone()));
    obj.insert("company".into(), Value::String(inst.company.clone()));
    obj.insert("year".into(), Value::String(inst.year.to_string()));
    obj.insert("question".into(), Value::String(inst.question.clone()));
    obj.insert("type".into(), Value::String(inst.question_type.as_str().into()));
    obj.insert("thoughts".into(), Value::String(inst.reasoning_trace.clone()));
    obj.insert(
        "page_numbers".into(),
        Value::Array(inst.evidence_pages.iter().map(|&p| Value::from(p)).collect()),
    );
    obj.insert("python_code".into(), Value::String(inst.program_source.clone()));
    obj.insert("answer".into(), Value::String(inst.gold_answer.clone()));
    obj.insert("report_id".into(), Value::String(inst.report_id.clone()));
    obj.insert("n_evidence_tables".into(), Value::from(inst.n_evidence_tables));
    obj.insert("difficulty".into(), Value::String(inst.difficulty.to_string()));
    if let Some(mode) = inst.percent_mode {
        obj.insert("percent_mode".into(), serde_json::to_value(mode).unwrap());
    }
    for (k, v) in &inst.extras {
        obj.insert(k.clone(), v.clone());
    }
    obj
}

/// Parses JSON-lines dataset text. Blank lines are skipped.
pub fn parse_dataset(text: &str) -> Result<Vec<QAInstance>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| CorpusError::Schema {
            line: line_no,
            message: format!("invalid JSON: {e}"),
        })?;
        let Value::Object(obj) = value else {
            return Err(CorpusError::Schema {
                line: line_no,
                message: "record must be a JSON object".into(),
            });
        };
        out.push(decode_instance(line_no, &obj)?);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<QAInstance>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| CorpusError::io(path, e))?);
        text.push('\n');
    }
    parse_dataset(&text)
}

pub fn write_dataset(instances: &[QAInstance], path: &Path) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(&Value::Object(encode_instance(inst))).expect("json map serializes");
        writeln!(w, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

/// Width of an evidence-page histogram bucket, in pages.
pub const HISTOGRAM_BUCKET_PAGES: u32 = 50;
/// Pages above this land in the final open-ended bucket.
pub const HISTOGRAM_LAST_PAGE: u32 = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    /// Human-readable range, e.g. `"1-50"` or `"501+"`.
    pub range: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

fn summary(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    Some(Summary {
        mean: v.iter().sum::<f64>() / n as f64,
        median,
        min: v[0],
        max: v[n - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub token_scheme: TokenScheme,
    pub n_reports: usize,
    pub n_companies: usize,
    pub n_pages: usize,
    pub n_tables: usize,
    /// Tokens per report.
    pub tokens: Option<Summary>,
    pub qa_count: usize,
    pub per_type: BTreeMap<QuestionType, usize>,
    pub per_difficulty: BTreeMap<Difficulty, usize>,
    /// Number of evidence pages per question.
    pub evidence_pages: Option<Summary>,
    /// Where evidence pages fall inside their reports.
    pub evidence_histogram: Vec<HistogramBucket>,
    /// Program lines per question (non-blank, non-comment).
    pub code_lines: Option<Summary>,
}

pub fn corpus_stats(reports: &[Report], instances: &[QAInstance]) -> Result<CorpusStats, CorpusError> {
    let known: BTreeSet<&str> = reports.iter().map(|r| r.report_id.as_str()).collect();
    for inst in instances {
        if !known.contains(inst.report_id.as_str()) {
            return Err(CorpusError::DanglingReference {
                instance: inst.id.clone(),
                report_id: inst.report_id.clone(),
            });
        }
    }
    let token_counts: Vec<f64> = reports.iter().map(|r| r.token_count() as f64).collect();
    let n_buckets = (HISTOGRAM_LAST_PAGE / HISTOGRAM_BUCKET_PAGES) as usize + 1;
    let mut histogram: Vec<HistogramBucket> = (0..n_buckets)
        .map(|i| {
            let lo = i as u32 * HISTOGRAM_BUCKET_PAGES + 1;
            let range = if i + 1 == n_buckets {
                format!("{lo}+")
            } else {
                format!("{lo}-{}", lo + HISTOGRAM_BUCKET_PAGES - 1)
            };
            HistogramBucket { range, count: 0 }
        })
        .collect();
    let mut per_type = BTreeMap::new();
    let mut per_difficulty = BTreeMap::new();
    for inst in instances {
        *per_type.entry(inst.question_type).or_insert(0) += 1;
        *per_difficulty.entry(inst.difficulty).or_insert(0) += 1;
        for &p in &inst.evidence_pages {
            let idx = (((p - 1) / HISTOGRAM_BUCKET_PAGES) as usize).min(n_buckets - 1);
            histogram[idx].count += 1;
        }
    }
    let evidence_counts: Vec<f64> = instances.iter().map(|i| i.evidence_pages.len() as f64).collect();
    let code_lines: Vec<f64> = instances
        .iter()
        .map(|i| {
            i.program_source
                .lines()
                .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
                .count() as f64
        })
        .collect();
    Ok(CorpusStats {
        token_scheme: TokenScheme::WhitespaceRuns,
        n_reports: reports.len(),
        n_companies: reports.iter().map(|r| r.company.as_str()).collect::<BTreeSet<_>>().len(),
        n_pages: reports.iter().map(|r| r.pages.len()).sum(),
        n_tables: reports
            .iter()
            .flat_map(|r| &r.pages)
            .map(|p| p.table_block_spans.len())
            .sum(),
        tokens: summary(&token_counts),
        qa_count: instances.len(),
        per_type,
        per_difficulty,
        evidence_pages: summary(&evidence_counts),
        evidence_histogram: histogram,
        code_lines: summary(&code_lines),
    })
}
