use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Map;

use super::generate::RawQA;
use super::program::{eval_program, parse_program, Program};
use crate::corpus::{report_key, QAInstance, Report};
use crate::metrics::{bucket_difficulty, normalize_answer, tolerance_correct, MetricConstants, PercentMode, QuestionType};

/// Why a generated record was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    SingleTable,
    CalcError,
    IncoherentAnswer,
    TooFewPages,
    ParseError,
}

impl FilterReason {
    pub const ALL: [FilterReason; 5] = [
        FilterReason::SingleTable,
        FilterReason::CalcError,
        FilterReason::IncoherentAnswer,
        FilterReason::TooFewPages,
        FilterReason::ParseError,
    ];

    /// Row label used in the filter report.
    pub fn label(&self) -> &'static str {
        match self {
            FilterReason::SingleTable => "Removal of single-table solvable cases",
            FilterReason::CalcError => "Removal of calculation errors",
            FilterReason::IncoherentAnswer => "Removal of incoherent answers",
            FilterReason::TooFewPages => "Removal of cases with fewer than two evidence pages",
            FilterReason::ParseError => "Removal of undecodable records",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub id: String,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<FilterReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub kept: usize,
    pub removed: BTreeMap<FilterReason, usize>,
}

impl FilterStats {
    pub fn count(&self, reason: FilterReason) -> usize {
        self.removed.get(&reason).copied().unwrap_or(0)
    }

    /// kept + all removals == input.
    pub fn reconciles(&self) -> bool {
        self.kept + self.removed.values().sum::<usize>() == self.input
    }

    /// Rows in pipeline order, labelled like a dataset-construction table.
    pub fn to_report_json(&self) -> serde_json::Value {
        let mut rows = vec![serde_json::json!({"stage": "Raw data generated by LLM", "count": self.input})];
        for reason in [
            FilterReason::ParseError,
            FilterReason::TooFewPages,
            FilterReason::SingleTable,
            FilterReason::CalcError,
            FilterReason::IncoherentAnswer,
        ] {
            rows.push(serde_json::json!({
                "stage": reason.label(),
                "reason": reason,
                "count": self.count(reason),
            }));
        }
        rows.push(serde_json::json!({"stage": "Remaining after rule-based filtering", "count": self.kept}));
        serde_json::json!({ "rows": rows, "input": self.input, "kept": self.kept, "removed": self.removed })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub kept: Vec<QAInstance>,
    pub outcomes: Vec<FilterOutcome>,
    pub stats: FilterStats,
}

/// Literal values too generic to locate a record in a table.
const GENERIC_CONSTANTS: [&str; 6] = ["0", "1", "2", "100", "1000", "1000000"];

static TABLE_NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\d[\d,]*(?:\.\d+)?|\.\d+").expect("static regex"));

/// Canonical absolute value of a numeric literal, or None.
fn canonical_abs(literal: &str) -> Option<String> {
    let n = normalize_answer(literal, PercentMode::AsGiven);
    n.value?;
    Some(n.canonical.trim_start_matches('-').trim_end_matches('%').to_string())
}

/// Data operands of a program: distinct canonical absolute values.
fn data_operands(program: &Program) -> BTreeSet<String> {
    program
        .operand_literals()
        .iter()
        .filter_map(|l| canonical_abs(l))
        .filter(|c| !GENERIC_CONSTANTS.contains(&c.as_str()))
        .collect()
}

/// Numbers appearing in a table block. Grouping commas and accounting
/// parentheses do not matter since values are compared by magnitude.
fn table_numbers(table: &str) -> BTreeSet<String> {
    TABLE_NUMBER
        .find_iter(table)
        .filter_map(|m| canonical_abs(m.as_str()))
        .collect()
}

/// Number sets of every table on the given pages.
fn evidence_tables(report: &Report, pages: &BTreeSet<u32>) -> Vec<BTreeSet<String>> {
    pages
        .iter()
        .filter_map(|p| report.page(*p))
        .flat_map(|page| page.tables().map(table_numbers).collect::<Vec<_>>())
        .collect()
}

/// Greedy cover: how many tables are needed to account for the operands that
/// appear in any table at all.
fn tables_needed(operands: &BTreeSet<String>, tables: &[BTreeSet<String>]) -> u32 {
    let mut uncovered: BTreeSet<&String> = operands
        .iter()
        .filter(|o| tables.iter().any(|t| t.contains(*o)))
        .collect();
    let mut n = 0;
    while !uncovered.is_empty() {
        let best = tables
            .iter()
            .max_by_key(|t| uncovered.iter().filter(|o| t.contains(**o)).count())
            .expect("uncovered operands come from some table");
        uncovered.retain(|o| !best.contains(*o));
        n += 1;
    }
    n
}

fn reject(id: &str, reason: FilterReason, detail: impl Into<String>) -> (FilterOutcome, Option<QAInstance>) {
    (
        FilterOutcome {
            id: id.to_string(),
            kept: false,
            reason: Some(reason),
            detail: Some(detail.into()),
        },
        None,
    )
}

fn resolve<'a>(raw: &RawQA, year: i32, reports: &'a HashMap<&str, &'a Report>) -> Option<&'a Report> {
    if let Some(id) = &raw.report_id {
        return reports.get(id.as_str()).copied();
    }
    reports.get(report_key(&raw.company, year).as_str()).copied()
}

fn check_one(
    raw: &RawQA,
    reports: &HashMap<&str, &Report>,
    c: &MetricConstants,
) -> (FilterOutcome, Option<QAInstance>) {
    use FilterReason::*;
    let id = raw.id.as_str();

    let Ok(year) = raw.year.trim().parse::<i32>() else {
        return reject(id, ParseError, format!("year is not an integer: {:?}", raw.year));
    };
    let Some(report) = resolve(raw, year, reports) else {
        return reject(id, ParseError, "report does not resolve");
    };
    let Some(question_type) = QuestionType::parse(&raw.question_type) else {
        return reject(id, ParseError, format!("unknown type {:?}", raw.question_type));
    };

    let pages: BTreeSet<u32> = raw.page_numbers.iter().copied().collect();
    if pages.len() < 2 {
        return reject(id, TooFewPages, format!("{} distinct evidence page(s)", pages.len()));
    }
    if let Some(missing) = pages.iter().find(|p| report.page(**p).is_none()) {
        return reject(id, ParseError, format!("page {missing} is not in the report"));
    }

    let program = match parse_program(&raw.program_source) {
        Ok(p) => p,
        Err(e) => return reject(id, ParseError, e.to_string()),
    };

    let operands = data_operands(&program);
    let tables = evidence_tables(report, &pages);
    if !operands.is_empty() && tables.iter().any(|t| operands.is_subset(t)) {
        return reject(id, SingleTable, "all operands sit in one table block");
    }

    let value = match eval_program(&program) {
        Ok(v) => v,
        Err(e) => return reject(id, CalcError, e.to_string()),
    };
    let stated = normalize_answer(&raw.answer, PercentMode::AsGiven);
    if let Some(gold) = stated.value {
        // Stated answers may be a percentage of a fraction-valued program or
        // the other way round; either scaling is accepted.
        let agrees = [value, value * 100.0, value / 100.0]
            .iter()
            .any(|v| tolerance_correct(*v, gold, c));
        if !agrees {
            return reject(id, CalcError, format!("program gives {value}, answer says {}", raw.answer));
        }
    } else {
        return reject(id, IncoherentAnswer, format!("answer is not numeric: {:?}", raw.answer));
    }

    let n_tables = tables_needed(&operands, &tables);
    let inst = QAInstance {
        id: raw.id.clone(),
        report_id: report.report_id.clone(),
        company: raw.company.clone(),
        year,
        question: raw.question.clone(),
        gold_answer: raw.answer.clone(),
        question_type,
        evidence_pages: pages,
        program_source: raw.program_source.clone(),
        reasoning_trace: raw.thoughts.clone(),
        n_evidence_tables: n_tables,
        difficulty: bucket_difficulty(n_tables),
        percent_mode: None,
        extras: Map::new(),
    };
    (
        FilterOutcome {
            id: raw.id.clone(),
            kept: true,
            reason: None,
            detail: None,
        },
        Some(inst),
    )
}

/// Applies the rule-based filters to a raw batch.
///
/// Checks run in this order, first failure wins: record decoding and report
/// resolution, at least two distinct evidence pages, program parsing,
/// single-table co-location of all operands, program execution against the
/// stated answer, numeric answer. Output order follows input order.
pub fn filter_pipeline(raw: &[RawQA], reports: &[Report], constants: &MetricConstants) -> FilterRun {
    let by_id: HashMap<&str, &Report> = reports.iter().map(|r| (r.report_id.as_str(), r)).collect();
    let results: Vec<(FilterOutcome, Option<QAInstance>)> =
        raw.par_iter().map(|qa| check_one(qa, &by_id, constants)).collect();

    let mut stats = FilterStats {
        input: raw.len(),
        ..FilterStats::default()
    };
    let mut kept = Vec::new();
    let mut outcomes = Vec::with_capacity(results.len());
    for (outcome, inst) in results {
        match outcome.reason {
            Some(r) => *stats.removed.entry(r).or_insert(0) += 1,
            None => stats.kept += 1,
        }
        kept.extend(inst);
        outcomes.push(outcome);
    }
    FilterRun { kept, outcomes, stats }
}

impl From<&QAInstance> for RawQA {
    fn from(inst: &QAInstance) -> Self {
        RawQA {
            id: inst.id.clone(),
            report_id: Some(inst.report_id.clone()),
            company: inst.company.clone(),
            year: inst.year.to_string(),
            question: inst.question.clone(),
            question_type: inst.question_type.as_str().to_string(),
            thoughts: inst.reasoning_trace.clone(),
            page_numbers: inst.evidence_pages.iter().copied().collect(),
            program_source: inst.program_source.clone(),
            answer: inst.gold_answer.clone(),
        }
    }
}
