use std::collections::BTreeSet;
use std::time::Instant;

use super::agents::{build_round_query, evaluate, expand, retrieve_round, solve};
use super::{render_context, AgentConfig, MissingComponent, RoundRecord, RunUsage, Termination, Transcript, VerdictKind};
use crate::llm::LlmClient;
use crate::retrieval::{RetrievalUnit, Retriever};

/// Runs the multi-round agent on one question over one report index.
///
/// Each round expands the question into a formula (with the previous
/// round's missing components as feedback), retrieves up to `k_per_round`
/// units not yet held, solves over everything held so far and asks the
/// evaluator for a verdict. The loop stops on a complete verdict, after
/// `max_rounds`, or once `chunk_budget` units are held, checked in that
/// order. Errors stop the run and return what was recorded so far.
pub fn run_agent(
    question_id: &str,
    question: &str,
    index: &dyn Retriever,
    llm: &LlmClient,
    config: &AgentConfig,
) -> Transcript {
    let started = Instant::now();
    let prompts = &config.prompts;
    let mut usage = RunUsage::default();
    let mut rounds: Vec<RoundRecord> = Vec::new();
    let mut held: BTreeSet<String> = BTreeSet::new();
    let mut held_units: Vec<&RetrievalUnit> = Vec::new();
    let mut feedback: Vec<MissingComponent> = Vec::new();
    let mut error = None;
    let mut termination = Termination::RoundLimit;

    for round in 1..=config.max_rounds.max(1) {
        let mut rec = RoundRecord::new(round);
        rec.expansion_feedback = feedback.clone();
        let step = (|| -> Result<VerdictKind, String> {
            let formula = expand(llm, prompts, question, &feedback, round, &mut usage).map_err(|e| e.to_string())?;
            rec.formula = Some(formula.formula_text.clone());

            let query = build_round_query(question, &formula.formula_text, &feedback);
            rec.query = Some(query.clone());
            let budget_left = config.chunk_budget.saturating_sub(held.len());
            let hits = retrieve_round(index, &query, config.k_per_round, &held, budget_left)
                .map_err(|e| format!("retrieval: {e}"))?;
            for h in &hits {
                held.insert(h.unit_id.clone());
                if let Some(u) = index.unit(&h.unit_id) {
                    held_units.push(u);
                }
                rec.new_units.push(h.unit_id.clone());
                rec.new_pages.push(h.page_number);
            }
            let pages: BTreeSet<u32> = held_units.iter().map(|u| u.page_number).collect();
            rec.context_pages = pages.into_iter().collect();
            rec.context_units = held.len();

            let context = render_context(held_units.iter().copied());
            let solver = solve(llm, prompts, question, &formula.formula_text, &context, &mut usage)
                .map_err(|e| e.to_string())?;
            rec.solver = Some(solver.clone());

            let verdict = evaluate(llm, prompts, question, &solver, &mut usage).map_err(|e| e.to_string())?;
            let kind = verdict.kind;
            feedback = verdict.missing.clone();
            rec.verdict = Some(verdict);
            Ok(kind)
        })();
        rounds.push(rec);

        match step {
            Err(e) => {
                error = Some(e);
                termination = Termination::Aborted;
                break;
            }
            Ok(VerdictKind::Complete) => {
                termination = Termination::Complete;
                break;
            }
            Ok(VerdictKind::Missing) => {
                if round >= config.max_rounds {
                    termination = Termination::RoundLimit;
                    break;
                }
                if held.len() >= config.chunk_budget {
                    termination = Termination::Budget;
                    break;
                }
            }
        }
    }

    let final_answer = rounds
        .iter()
        .rev()
        .find_map(|r| r.solver.as_ref())
        .map_or_else(|| "0".to_string(), |s| s.answer.as_submitted());
    Transcript {
        question_id: question_id.to_string(),
        question: question.to_string(),
        pipeline: "agent".into(),
        rounds,
        final_answer,
        termination,
        error,
        wall_time_ms: config.record_wall_time.then(|| started.elapsed().as_millis() as u64),
        usage,
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::llm::{ChatBackend, LlmError, Matcher, ProviderConfig, ScriptRule, ScriptedBackend};
    use crate::retrieval::{build_sparse_index, Bm25Params, SparseScheme};

    fn index(n: u32) -> crate::retrieval::SparseIndex {
        let units = (1..=n)
            .map(|p| {
                let text = format!("{} ebitda item{p}", "margin ".repeat(1 + (p as usize % 7)));
                RetrievalUnit {
                    unit_id: format!("p{p}"),
                    page_number: p,
                    token_count: text.split_whitespace().count(),
                    text,
                }
            })
            .collect();
        build_sparse_index(units, SparseScheme::Bm25, Bm25Params::default()).unwrap()
    }

    fn always_missing() -> LlmClient {
        LlmClient::new(
            ProviderConfig::default(),
            Arc::new(ScriptedBackend::repeatable(vec![
                ScriptRule::new(Matcher::contains("only* return the complete formula as a whole—"), "EBITDA / margin"),
                ScriptRule::new(Matcher::contains("inspects a generated answer"), "margin"),
                ScriptRule::new(Matcher::contains("Annual report pages"), "page_number: 3 {{1.25}}"),
            ])),
        )
    }

    #[test]
    fn round_limit_and_budget() {
        let idx = index(200);
        let t = run_agent("q", "What is the EBITDA margin?", &idx, &always_missing(), &AgentConfig::default());
        assert_eq!(t.termination, Termination::RoundLimit);
        assert_eq!(t.rounds.len(), 5);
        assert_eq!(t.final_answer, "1.25");
        let mut seen = BTreeSet::new();
        for (i, r) in t.rounds.iter().enumerate() {
            assert_eq!(r.round, i + 1);
            assert_eq!(r.new_units.len(), 15);
            for u in &r.new_units {
                assert!(seen.insert(u.clone()), "unit {u} retrieved twice");
            }
            assert!(r.context_units <= 75);
        }
        assert_eq!(seen.len(), 75);
        for w in t.rounds.windows(2) {
            let a: BTreeSet<_> = w[0].context_pages.iter().collect();
            let b: BTreeSet<_> = w[1].context_pages.iter().collect();
            assert!(a.is_subset(&b));
        }
    }

    #[test]
    fn budget_stops_before_round_limit() {
        let idx = index(200);
        let config = AgentConfig {
            chunk_budget: 20,
            ..AgentConfig::default()
        };
        let t = run_agent("q", "What is the EBITDA margin?", &idx, &always_missing(), &config);
        assert_eq!(t.termination, Termination::Budget);
        assert_eq!(t.rounds.len(), 2);
        assert_eq!(t.rounds[1].new_units.len(), 5);
        assert_eq!(t.rounds[1].context_units, 20);
    }

    #[test]
    fn deterministic_transcripts() {
        let idx = index(50);
        let a = run_agent("q", "What is the EBITDA margin?", &idx, &always_missing(), &AgentConfig::default());
        let b = run_agent("q", "What is the EBITDA margin?", &idx, &always_missing(), &AgentConfig::default());
        assert_eq!(a.to_json(), b.to_json());
    }

    struct FailAfter(std::sync::atomic::AtomicUsize);

    impl ChatBackend for FailAfter {
        fn complete(&self, _: &ProviderConfig, _: &[crate::llm::ChatMessage]) -> Result<String, LlmError> {
            if self.0.fetch_sub(1, std::sync::atomic::Ordering::SeqCst) == 0 {
                return Err(LlmError::Decode("boom".into()));
            }
            Ok("{{4}}".into())
        }
    }

    #[test]
    fn errors_abort_with_partial_transcript() {
        let idx = index(30);
        let llm = LlmClient::new(ProviderConfig::default(), Arc::new(FailAfter(2.into())));
        let t = run_agent("q", "What is the EBITDA margin?", &idx, &llm, &AgentConfig::default());
        assert_eq!(t.termination, Termination::Aborted);
        assert_eq!(t.rounds.len(), 1);
        assert!(t.rounds[0].solver.is_some());
        assert!(t.rounds[0].verdict.is_none());
        assert_eq!(t.final_answer, "4");
        assert!(t.error.unwrap().contains("boom"));
    }
}
