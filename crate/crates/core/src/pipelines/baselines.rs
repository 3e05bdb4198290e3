use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::agents::answer_with_retry;
use super::{fill, render_context, AgentConfig, RoundRecord, RunUsage, Termination, Transcript};
use crate::corpus::{count_tokens, Report};
use crate::llm::{prompt_tokens, ChatMessage, LlmClient};
use crate::retrieval::{Retriever, ScoredHit};

/// Single-shot comparison pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaselineKind {
    /// The question alone.
    NoContext,
    /// The report from its first page, cut to the input budget.
    LongContext,
    /// One retrieval of the top `k` units (30 by default).
    SingleRoundRag { k: usize },
    /// One retrieval at the agent's total budget (75 by default).
    FixedBudgetRag { k: usize },
}

impl BaselineKind {
    pub fn name(&self) -> String {
        match self {
            BaselineKind::NoContext => "no_context".into(),
            BaselineKind::LongContext => "long_context".into(),
            BaselineKind::SingleRoundRag { k } => format!("single_round_rag_k{k}"),
            BaselineKind::FixedBudgetRag { k } => format!("fixed_budget_rag_k{k}"),
        }
    }
}

/// What a baseline may draw on. Retrieval kinds need `index`, the long
/// context kind needs `report`.
#[derive(Clone, Copy)]
pub struct BaselineInput<'a> {
    pub report: Option<&'a Report>,
    pub index: Option<&'a dyn Retriever>,
}

/// Longest prefix of `text` holding at most `max_tokens` whitespace tokens.
pub fn truncate_to_tokens(text: &str, max_tokens: usize) -> &str {
    if max_tokens == 0 {
        return "";
    }
    let mut count = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_token {
                in_token = false;
                if count == max_tokens {
                    return &text[..i];
                }
            }
        } else if !in_token {
            in_token = true;
            count += 1;
        }
    }
    text
}

fn transcript(
    question_id: &str,
    question: &str,
    kind: BaselineKind,
    record: RoundRecord,
    usage: RunUsage,
    error: Option<String>,
    wall: Option<u64>,
) -> Transcript {
    let final_answer = record
        .solver
        .as_ref()
        .map_or_else(|| "0".to_string(), |s| s.answer.as_submitted());
    Transcript {
        question_id: question_id.to_string(),
        question: question.to_string(),
        pipeline: kind.name(),
        rounds: vec![record],
        final_answer,
        termination: if error.is_some() {
            Termination::Aborted
        } else {
            Termination::SingleShot
        },
        error,
        wall_time_ms: wall,
        usage,
    }
}

/// Runs one baseline. Answers are extracted exactly as for the agent's
/// solver, including the single follow-up on extraction failure.
pub fn run_baseline(
    kind: BaselineKind,
    question_id: &str,
    question: &str,
    input: BaselineInput<'_>,
    llm: &LlmClient,
    config: &AgentConfig,
) -> Transcript {
    let started = Instant::now();
    let prompts = &config.prompts;
    let mut usage = RunUsage::default();
    let mut record = RoundRecord::new(1);
    let system = ChatMessage::system(&prompts.solving_system);

    let user = match kind {
        BaselineKind::NoContext => Ok(fill(&prompts.baseline_user_no_context, &[("question", question)])),
        BaselineKind::LongContext => match input.report {
            None => Err("long_context baseline needs the report".to_string()),
            Some(report) => {
                let skeleton = fill(&prompts.baseline_user, &[("question", question), ("context", "")]);
                let overhead = count_tokens(&prompts.solving_system) + count_tokens(&skeleton);
                let budget = llm.config().input_budget().saturating_sub(overhead);
                let full = report.to_markdown();
                let mut cut = truncate_to_tokens(&full, budget);
                // Token runs can merge at the seams; shrink until it fits.
                let mut allowance = budget;
                loop {
                    let user = fill(&prompts.baseline_user, &[("question", question), ("context", cut)]);
                    let msgs = [system.clone(), ChatMessage::user(user.clone())];
                    if prompt_tokens(&msgs) <= llm.config().input_budget() || allowance == 0 {
                        let pages: std::collections::BTreeSet<u32> = report
                            .pages
                            .iter()
                            .filter(|p| cut.contains(&format!("<!-- page {} -->", p.page_number)))
                            .map(|p| p.page_number)
                            .collect();
                        record.context_pages = pages.into_iter().collect();
                        break Ok(user);
                    }
                    allowance -= 1;
                    cut = truncate_to_tokens(&full, allowance);
                }
            }
        },
        BaselineKind::SingleRoundRag { k } | BaselineKind::FixedBudgetRag { k } => match input.index {
            None => Err("retrieval baseline needs an index".to_string()),
            Some(index) => (|| {
                let hits: Vec<ScoredHit> = match index.search(question, k.max(1)) {
                    Ok(h) => Ok(h),
                    Err(crate::retrieval::RetrievalError::EmptyQuery) => Ok(Vec::new()),
                    Err(e) => Err(format!("retrieval: {e}")),
                }?;
                record.query = Some(question.to_string());
                record.new_units = hits.iter().map(|h| h.unit_id.clone()).collect();
                record.new_pages = hits.iter().map(|h| h.page_number).collect();
                let units: Vec<_> = hits.iter().filter_map(|h| index.unit(&h.unit_id)).collect();
                let mut pages: Vec<u32> = units.iter().map(|u| u.page_number).collect();
                pages.sort_unstable();
                pages.dedup();
                record.context_pages = pages;
                record.context_units = units.len();
                let context = render_context(units);
                let context = if context.is_empty() { "(no pages retrieved)".to_string() } else { context };
                Ok(fill(&prompts.baseline_user, &[("question", question), ("context", &context)]))
            })(),
        },
    };

    let error = match user {
        Err(e) => Some(e),
        Ok(user) => match answer_with_retry(llm, prompts, vec![system, ChatMessage::user(user)], &mut usage) {
            Ok(out) => {
                record.solver = Some(out);
                None
            }
            Err(e) => Some(e.to_string()),
        },
    };
    let wall = config.record_wall_time.then(|| started.elapsed().as_millis() as u64);
    transcript(question_id, question, kind, record, usage, error, wall)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::corpus::PageChunk;
    use crate::llm::{Matcher, ProviderConfig, ScriptRule, ScriptedBackend};

    fn llm(config: ProviderConfig, reply: &str) -> LlmClient {
        LlmClient::new(
            config,
            Arc::new(ScriptedBackend::repeatable(vec![ScriptRule::new(Matcher::contains("Question:"), reply)])),
        )
    }

    #[test]
    fn no_context() {
        let t = run_baseline(
            BaselineKind::NoContext,
            "q1",
            "What is the margin?",
            BaselineInput { report: None, index: None },
            &llm(ProviderConfig::default(), "{{0.12}}"),
            &AgentConfig::default(),
        );
        assert_eq!(t.final_answer, "0.12");
        assert_eq!(t.termination, Termination::SingleShot);
        assert_eq!(t.pipeline, "no_context");
    }

    #[test]
    fn long_context_fits_the_budget() {
        let report = Report {
            report_id: "r".into(),
            company: "Acme".into(),
            fiscal_year: 2023,
            pages: (1..=50).map(|p| PageChunk::new(p, "word ".repeat(100))).collect(),
        };
        let config = ProviderConfig {
            max_input_tokens: 1000,
            ..ProviderConfig::default()
        };
        let client = llm(config, "{{1}}");
        let t = run_baseline(
            BaselineKind::LongContext,
            "q",
            "What is it?",
            BaselineInput { report: Some(&report), index: None },
            &client,
            &AgentConfig::default(),
        );
        assert!(t.error.is_none(), "{:?}", t.error);
        assert_eq!(t.final_answer, "1");
        assert!(t.usage.prompt_tokens <= 1000);
        assert!(t.usage.prompt_tokens > 900);
        assert_eq!(t.rounds[0].context_pages.first(), Some(&1));
        assert!(t.rounds[0].context_pages.len() < 50);
    }

    #[test]
    fn missing_inputs_abort() {
        let t = run_baseline(
            BaselineKind::SingleRoundRag { k: 30 },
            "q",
            "What?",
            BaselineInput { report: None, index: None },
            &llm(ProviderConfig::default(), "{{1}}"),
            &AgentConfig::default(),
        );
        assert_eq!(t.termination, Termination::Aborted);
    }

    #[test]
    fn truncation() {
        assert_eq!(truncate_to_tokens("a b  c d", 2), "a b");
        assert_eq!(truncate_to_tokens("a b", 5), "a b");
        assert_eq!(truncate_to_tokens("  a\nb", 1), "  a");
        assert_eq!(truncate_to_tokens("a", 0), "");
    }
}
