//! Question answering pipelines.
//!
//! [`run_agent`] is the multi-round loop: an expansion agent turns the
//! question into a formula, retrieval adds new units to a cumulative context,
//! a solving agent answers from that context, and an evaluation agent either
//! accepts the answer or names missing line items for the next round.
//! [`run_baseline`] covers the single-shot comparisons.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::llm::Completion;
use crate::retrieval::Granularity;

mod agents;
mod baselines;
mod orchestrator;

pub use agents::{
    build_round_query, cited_pages, evaluate, expand, extract_answer, parse_verdict, retrieve_round, solve,
    ExtractionFailure,
};
pub use baselines::{run_baseline, truncate_to_tokens, BaselineKind, BaselineInput};
pub use orchestrator::run_agent;

pub const EXPANSION_SYSTEM_PROMPT: &str = "You are an expert at financial text understanding.
Given a user's question about a financial ratio in an annual report, think of which accounts will feed into that formula, and *only* return the complete formula as a whole—no explanations.";

pub const SOLVING_SYSTEM_PROMPT: &str = "You are a helpful assistant that answers financial QA based on the provided annual report in Markdown form.
You should clearly show your data source through page_number and formula to justify each calculation.
Your final numerical answer must be rounded to two decimal places and enclosed in double curly braces {{}} with no extra text or units.
If the information is insufficient, put 0 inside the {{}}.

Given a user's question about a financial ratio in an annual report, think of which line items (accounts) will feed into that formula, and *only* return the complete formula as a whole-no explanations.";

pub const EVALUATION_SYSTEM_PROMPT: &str = "You are an expert assistant that inspects a generated answer against the question.
You have two tasks:
1) If the answer is missing any critical components needed to compute the numeric result, return a comma-separated list of exactly those missing components (e.g., 'net income', 'total assets'). For each missing component, also include common synonyms or variant phrasings that might appear in the report (e.g., for 'COGS': 'cost of goods sold', 'cost of sales').
2) If the answer is not using 'exactly' the same accounts as the question stated (e.g., 'Consolidated other assets' vs 'Condensed other assets'), return a comma-separated list of the exact account names mentioned in the question. For each incorrect account, also include common synonyms or variant phrasings that might appear in the report (e.g., for 'COGS': 'cost of goods sold', 'cost of sales').
If nothing is missing and the answer uses exactly the same accounts as in the question, reply with 'NONE'.";

/// System prompts plus the user-message layouts that carry the per-call
/// data. Slots: `{question}`, `{formula}`, `{context}`, `{feedback}` and, for
/// the evaluator, `{answer}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub expansion_system: String,
    pub expansion_user: String,
    /// Appended to the expansion user message when feedback exists.
    pub expansion_feedback: String,
    pub solving_system: String,
    pub solving_user: String,
    pub evaluation_system: String,
    pub evaluation_user: String,
    /// Single-shot baselines: user message with and without context.
    pub baseline_user: String,
    pub baseline_user_no_context: String,
    /// Follow-up sent once when no answer could be extracted.
    pub extraction_retry: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            expansion_system: EXPANSION_SYSTEM_PROMPT.into(),
            expansion_user: "Question: {question}".into(),
            expansion_feedback: "\n\nThe previous answer was missing these components (with synonyms): {feedback}"
                .into(),
            solving_system: SOLVING_SYSTEM_PROMPT.into(),
            solving_user: "Annual report pages:\n\n{context}\n\nFormula: {formula}\n\nQuestion: {question}".into(),
            evaluation_system: EVALUATION_SYSTEM_PROMPT.into(),
            evaluation_user: "Question: {question}\n\nAnswer:\n{answer}".into(),
            baseline_user: "Annual report pages:\n\n{context}\n\nQuestion: {question}".into(),
            baseline_user_no_context: "Question: {question}".into(),
            extraction_retry: "State only the final numerical answer enclosed in double curly braces {{}}.".into(),
        }
    }
}

/// Fills `{name}` slots in one pass, so slot-like text inside substituted
/// values is never expanded again.
pub fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'outer: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (name, value) in slots {
            let key_len = name.len() + 2;
            if tail.len() >= key_len && tail[1..].starts_with(name) && tail.as_bytes()[key_len - 1] == b'}' {
                out.push_str(value);
                rest = &tail[key_len..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

/// Which index the runner builds for retrieval pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Bm25,
    Tfidf,
    Dense,
}

impl std::str::FromStr for IndexKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bm25" => Ok(Self::Bm25),
            "tfidf" | "tf-idf" => Ok(Self::Tfidf),
            "dense" => Ok(Self::Dense),
            other => Err(format!("unknown index kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub max_rounds: usize,
    pub k_per_round: usize,
    /// Most units the context may ever hold.
    pub chunk_budget: usize,
    pub index: IndexKind,
    pub granularity: Granularity,
    pub prompts: PromptTemplates,
    /// Record elapsed time in transcripts. Off keeps transcripts
    /// byte-identical across runs.
    pub record_wall_time: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_rounds: 5,
            k_per_round: 15,
            chunk_budget: 75,
            index: IndexKind::Bm25,
            granularity: Granularity::Page,
            prompts: PromptTemplates::default(),
            record_wall_time: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_rounds == 0 {
            return Err("max_rounds must be at least 1".into());
        }
        if self.k_per_round == 0 {
            return Err("k_per_round must be at least 1".into());
        }
        if self.chunk_budget == 0 {
            return Err("chunk_budget must be at least 1".into());
        }
        if let Granularity::Tokens(0) = self.granularity {
            return Err("chunk size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedFormula {
    pub formula_text: String,
    pub source_round: usize,
}

/// A line item the evaluator found missing, with alternative phrasings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingComponent {
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

impl MissingComponent {
    pub fn new(name: impl Into<String>, synonyms: &[&str]) -> Self {
        Self {
            name: name.into(),
            synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Complete,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorVerdict {
    pub kind: VerdictKind,
    pub missing: Vec<MissingComponent>,
    pub raw_text: String,
}

/// What the solver concluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverAnswer {
    Value { canonical: String, value: f64 },
    Insufficient,
}

impl SolverAnswer {
    /// Answer string as submitted for scoring; insufficient becomes "0".
    pub fn as_submitted(&self) -> String {
        match self {
            SolverAnswer::Value { canonical, .. } => canonical.clone(),
            SolverAnswer::Insufficient => "0".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOutput {
    pub raw_text: String,
    pub answer: SolverAnswer,
    pub cited_pages: BTreeSet<u32>,
    /// No parseable `{{...}}` group, even after one follow-up.
    #[serde(default)]
    pub extraction_failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Complete,
    RoundLimit,
    Budget,
    /// A single-shot pipeline finished.
    SingleShot,
    /// An LLM or retrieval error stopped the run; the transcript is partial.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Feedback the expansion agent received (empty in round 1).
    pub expansion_feedback: Vec<MissingComponent>,
    pub formula: Option<String>,
    pub query: Option<String>,
    pub new_units: Vec<String>,
    pub new_pages: Vec<u32>,
    /// Distinct pages held after this round's retrieval.
    pub context_pages: Vec<u32>,
    pub context_units: usize,
    pub solver: Option<SolverOutput>,
    pub verdict: Option<EvaluatorVerdict>,
}

impl RoundRecord {
    fn new(round: usize) -> Self {
        Self {
            round,
            expansion_feedback: Vec::new(),
            formula: None,
            query: None,
            new_units: Vec::new(),
            new_pages: Vec::new(),
            context_pages: Vec::new(),
            context_units: 0,
            solver: None,
            verdict: None,
        }
    }
}

/// Token accounting for the calls made by one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunUsage {
    pub llm_calls: usize,
    pub cache_hits: usize,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

impl RunUsage {
    pub(crate) fn add(&mut self, c: &Completion) {
        self.llm_calls += 1;
        self.cache_hits += usize::from(c.cached);
        self.prompt_tokens += c.prompt_tokens;
        self.completion_tokens += c.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub question_id: String,
    pub question: String,
    pub pipeline: String,
    pub rounds: Vec<RoundRecord>,
    pub final_answer: String,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u64>,
    pub usage: RunUsage,
}

impl Transcript {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }
}

/// Renders retrieved units under page delimiters, in page then id order.
pub fn render_context<'a, I>(units: I) -> String
where
    I: IntoIterator<Item = &'a crate::retrieval::RetrievalUnit>,
{
    let mut units: Vec<_> = units.into_iter().collect();
    units.sort_by(|a, b| a.page_number.cmp(&b.page_number).then_with(|| a.unit_id.cmp(&b.unit_id)));
    let mut out = String::new();
    for u in units {
        out.push_str(&format!("<!-- page {} -->\n{}\n", u.page_number, u.text));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_is_single_pass() {
        assert_eq!(fill("Q: {question} F: {formula}", &[("question", "{formula}"), ("formula", "x")]), "Q: {formula} F: x");
        assert_eq!(fill("{{}} {question}", &[("question", "q")]), "{{}} q");
        assert_eq!(fill("{unknown}", &[("question", "q")]), "{unknown}");
    }

    #[test]
    fn system_prompts_keep_braces() {
        assert!(SOLVING_SYSTEM_PROMPT.contains("enclosed in double curly braces {{}}"));
        assert!(EVALUATION_SYSTEM_PROMPT.ends_with("reply with 'NONE'."));
        assert!(EXPANSION_SYSTEM_PROMPT.contains("*only* return the complete formula"));
    }

    #[test]
    fn config_round_trip() {
        let c = AgentConfig::default();
        let back: AgentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: AgentConfig = serde_json::from_str(r#"{"max_rounds": 2}"#).unwrap();
        assert_eq!(partial.max_rounds, 2);
        assert_eq!(partial.k_per_round, 15);
    }
}
