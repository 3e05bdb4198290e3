use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use super::{
    fill, EvaluatorVerdict, ExpandedFormula, MissingComponent, PromptTemplates, RunUsage, SolverAnswer, SolverOutput,
    VerdictKind,
};
use crate::llm::{ChatMessage, LlmClient, LlmError};
use crate::metrics::{normalize_answer, PercentMode};
use crate::retrieval::{RetrievalError, Retriever, ScoredHit};

/// Asks the expansion agent for a formula. Feedback, when present, lists the
/// components the previous round missed.
pub fn expand(
    llm: &LlmClient,
    prompts: &PromptTemplates,
    question: &str,
    feedback: &[MissingComponent],
    round: usize,
    usage: &mut RunUsage,
) -> Result<ExpandedFormula, LlmError> {
    if question.trim().is_empty() {
        return Err(LlmError::InvalidMessage("question is empty".into()));
    }
    let mut user = fill(&prompts.expansion_user, &[("question", question)]);
    if !feedback.is_empty() {
        user.push_str(&fill(&prompts.expansion_feedback, &[("feedback", &render_feedback(feedback))]));
    }
    let c = llm.complete(&[ChatMessage::system(&prompts.expansion_system), ChatMessage::user(user)])?;
    usage.add(&c);
    Ok(ExpandedFormula {
        formula_text: c.text,
        source_round: round,
    })
}

fn render_feedback(feedback: &[MissingComponent]) -> String {
    feedback
        .iter()
        .map(|m| {
            if m.synonyms.is_empty() {
                m.name.clone()
            } else {
                format!("{} ({})", m.name, m.synonyms.join(", "))
            }
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Line-item phrases of a formula: the text between operators, brackets and
/// separators, without bare numbers.
fn formula_terms(formula: &str) -> Vec<String> {
    formula
        .split(|c: char| "+-*/×÷()[]{}=,;:\n".contains(c))
        .map(|t| t.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|t| !t.is_empty() && t.chars().any(char::is_alphabetic))
        .collect()
}

fn normalize_phrase(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// True when `phrase` occurs in `haystack` on word boundaries.
fn contains_phrase(haystack: &str, phrase: &str) -> bool {
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(phrase) {
        let start = from + pos;
        let end = start + phrase.len();
        let before_ok = haystack[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after_ok = haystack[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return true;
        }
        from = start + phrase.chars().next().map_or(1, char::len_utf8);
    }
    false
}

/// Query for one round: the question, then formula terms, then missing
/// components and their synonyms. A phrase already present (case-insensitive,
/// whole words) is skipped, so order is kept and nothing repeats.
pub fn build_round_query(question: &str, formula: &str, missing: &[MissingComponent]) -> String {
    let mut phrases: Vec<String> = Vec::new();
    let mut seen = String::new();
    let mut push = |p: &str| {
        let norm = normalize_phrase(p);
        if norm.is_empty() || contains_phrase(&seen, &norm) {
            return;
        }
        seen.push_str(&norm);
        seen.push_str(" | ");
        phrases.push(p.split_whitespace().collect::<Vec<_>>().join(" "));
    };
    push(question);
    for t in formula_terms(formula) {
        push(&t);
    }
    for m in missing {
        push(&m.name);
        for s in &m.synonyms {
            push(s);
        }
    }
    phrases.join("; ")
}

/// Top `k` units for `query` that are not already held, cut to the remaining
/// budget. A query without searchable terms retrieves nothing.
pub fn retrieve_round(
    index: &dyn Retriever,
    query: &str,
    k: usize,
    exclude: &BTreeSet<String>,
    budget_left: usize,
) -> Result<Vec<ScoredHit>, RetrievalError> {
    let take = k.min(budget_left);
    if take == 0 {
        return Ok(Vec::new());
    }
    let hits = match index.search(query, k + exclude.len()) {
        Ok(h) => h,
        Err(RetrievalError::EmptyQuery) => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    Ok(hits.into_iter().filter(|h| !exclude.contains(&h.unit_id)).take(take).collect())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no parseable {{{{...}}}} answer in reply")]
pub struct ExtractionFailure;

static BRACES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{\{([^{}]*)\}\}").expect("static regex"));
static PAGE_CITE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\bpage(?:[_ ]?(?:number|no\.?))?s?\s*[:#=]?\s*(\d+)").expect("static regex")
});

/// The last `{{...}}` group whose content is a number. Exactly `0` means the
/// solver reported insufficient information.
pub fn extract_answer(text: &str) -> Result<SolverAnswer, ExtractionFailure> {
    let groups: Vec<&str> = BRACES.captures_iter(text).map(|c| c.get(1).unwrap().as_str()).collect();
    for content in groups.iter().rev() {
        let content = content.trim();
        if content == "0" {
            return Ok(SolverAnswer::Insufficient);
        }
        let n = normalize_answer(content, PercentMode::AsGiven);
        if let Some(value) = n.value {
            return Ok(SolverAnswer::Value {
                canonical: n.canonical,
                value,
            });
        }
    }
    Err(ExtractionFailure)
}

/// Page numbers cited as `page_number: N`, `page N` and similar.
pub fn cited_pages(text: &str) -> BTreeSet<u32> {
    PAGE_CITE
        .captures_iter(text)
        .filter_map(|c| c.get(1)?.as_str().parse().ok())
        .collect()
}

/// Sends `messages`, extracting an answer; on failure asks once more with a
/// follow-up in the same conversation.
pub(crate) fn answer_with_retry(
    llm: &LlmClient,
    prompts: &PromptTemplates,
    mut messages: Vec<ChatMessage>,
    usage: &mut RunUsage,
) -> Result<SolverOutput, LlmError> {
    let first = llm.complete(&messages)?;
    usage.add(&first);
    let mut raw_text = first.text;
    let answer = match extract_answer(&raw_text) {
        Ok(a) => Some(a),
        Err(ExtractionFailure) => {
            messages.push(ChatMessage::assistant(raw_text.clone()));
            messages.push(ChatMessage::user(&prompts.extraction_retry));
            let second = llm.complete(&messages)?;
            usage.add(&second);
            raw_text.push_str("\n\n");
            raw_text.push_str(&second.text);
            extract_answer(&second.text).ok()
        }
    };
    Ok(SolverOutput {
        cited_pages: cited_pages(&raw_text),
        extraction_failed: answer.is_none(),
        answer: answer.unwrap_or(SolverAnswer::Insufficient),
        raw_text,
    })
}

/// Asks the solving agent to answer from the rendered context.
pub fn solve(
    llm: &LlmClient,
    prompts: &PromptTemplates,
    question: &str,
    formula: &str,
    context: &str,
    usage: &mut RunUsage,
) -> Result<SolverOutput, LlmError> {
    let context = if context.trim().is_empty() {
        "(no pages retrieved)"
    } else {
        context
    };
    let user = fill(
        &prompts.solving_user,
        &[("question", question), ("formula", formula), ("context", context)],
    );
    answer_with_retry(
        llm,
        prompts,
        vec![ChatMessage::system(&prompts.solving_system), ChatMessage::user(user)],
        usage,
    )
}

/// Asks the evaluation agent whether the answer is complete.
pub fn evaluate(
    llm: &LlmClient,
    prompts: &PromptTemplates,
    question: &str,
    solver: &SolverOutput,
    usage: &mut RunUsage,
) -> Result<EvaluatorVerdict, LlmError> {
    let user = fill(&prompts.evaluation_user, &[("question", question), ("answer", &solver.raw_text)]);
    let c = llm.complete(&[ChatMessage::system(&prompts.evaluation_system), ChatMessage::user(user)])?;
    usage.add(&c);
    Ok(parse_verdict(&c.text))
}

fn clean_item(s: &str) -> String {
    let s = s.trim();
    let s = s
        .trim_start_matches(|c: char| c == '-' || c == '*' || c == '•')
        .trim_start();
    // List numbering such as "1)" or "2."
    let s = match s.find(|c: char| !c.is_ascii_digit()) {
        Some(i) if i > 0 && (s[i..].starts_with(')') || s[i..].starts_with('.')) => s[i + 1..].trim_start(),
        _ => s,
    };
    s.trim_matches(|c: char| c.is_whitespace() || "'\"`‘’“”.".contains(c))
        .to_string()
}

/// Splits on `sep` outside parentheses.
fn split_top(s: &str, sep: char) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            c if c == sep && depth <= 0 => {
                parts.push(&s[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

fn split_synonyms(s: &str) -> Vec<String> {
    s.split([',', ';', '/'])
        .flat_map(|p| p.split(" or "))
        .map(clean_item)
        .filter(|p| !p.is_empty())
        .collect()
}

fn parse_component(item: &str) -> Option<MissingComponent> {
    if let (Some(open), Some(close)) = (item.find('('), item.rfind(')')) {
        if open < close {
            let name = clean_item(&item[..open]);
            let synonyms = split_synonyms(&item[open + 1..close]);
            if !name.is_empty() {
                return Some(MissingComponent { name, synonyms });
            }
        }
    }
    let name = clean_item(item);
    (!name.is_empty()).then(|| MissingComponent {
        name,
        synonyms: Vec::new(),
    })
}

/// Reads an evaluator reply. `NONE` means complete; anything else lists
/// missing components, one per comma, with synonyms in parentheses or after
/// a colon (one component per line in the colon form). A reply that yields no
/// component is kept whole as a single one, so the run keeps searching.
pub fn parse_verdict(reply: &str) -> EvaluatorVerdict {
    let trimmed = reply.trim();
    if trimmed.eq_ignore_ascii_case("NONE") {
        return EvaluatorVerdict {
            kind: VerdictKind::Complete,
            missing: Vec::new(),
            raw_text: reply.to_string(),
        };
    }
    let mut missing = Vec::new();
    for line in trimmed.lines().filter(|l| !l.trim().is_empty()) {
        let colon = split_top(line, ':');
        if colon.len() >= 2 {
            let name = clean_item(colon[0]);
            let synonyms = split_synonyms(&colon[1..].join(":").replace(['(', ')'], ""));
            if !name.is_empty() {
                missing.push(MissingComponent { name, synonyms });
                continue;
            }
        }
        missing.extend(split_top(line, ',').into_iter().filter_map(parse_component));
    }
    if missing.is_empty() {
        missing.push(MissingComponent {
            name: if trimmed.is_empty() { "(empty reply)".into() } else { trimmed.to_string() },
            synonyms: Vec::new(),
        });
    }
    EvaluatorVerdict {
        kind: VerdictKind::Missing,
        missing,
        raw_text: reply.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::llm::{Matcher, ProviderConfig, ScriptRule, ScriptedBackend};
    use crate::retrieval::{build_sparse_index, Bm25Params, RetrievalUnit, SparseScheme};

    fn client(rules: Vec<ScriptRule>) -> LlmClient {
        LlmClient::new(ProviderConfig::default(), Arc::new(ScriptedBackend::repeatable(rules)))
    }

    fn value(a: &SolverAnswer) -> f64 {
        match a {
            SolverAnswer::Value { value, .. } => *value,
            SolverAnswer::Insufficient => panic!("insufficient"),
        }
    }

    #[test]
    fn extraction() {
        assert_eq!(value(&extract_answer("answer is {{147.82}}").unwrap()), 147.82);
        assert_eq!(value(&extract_answer("{{3.49}} and {{3.50}}").unwrap()), 3.5);
        assert_eq!(extract_answer("{{0}}").unwrap(), SolverAnswer::Insufficient);
        assert_eq!(extract_answer("no braces here"), Err(ExtractionFailure));
        assert_eq!(value(&extract_answer("{{1.55}} then {{n/a}}").unwrap()), 1.55);
        assert_eq!(value(&extract_answer("{{ $1,234.50 }}").unwrap()), 1234.5);
        assert_eq!(value(&extract_answer("{{0.00}}").unwrap()), 0.0);
    }

    #[test]
    fn citations() {
        assert_eq!(
            cited_pages("EBITDA (page_number: 50) ... interest page_number: 51"),
            BTreeSet::from([50, 51])
        );
        assert_eq!(cited_pages("see Page 7 and page 12"), BTreeSet::from([7, 12]));
        assert!(cited_pages("no pages").is_empty());
    }

    #[test]
    fn verdicts() {
        assert_eq!(parse_verdict("NONE").kind, VerdictKind::Complete);
        assert_eq!(parse_verdict("  none \n").kind, VerdictKind::Complete);
        let v = parse_verdict("net income, total assets");
        assert_eq!(v.kind, VerdictKind::Missing);
        assert_eq!(
            v.missing,
            vec![MissingComponent::new("net income", &[]), MissingComponent::new("total assets", &[])]
        );
        let v = parse_verdict("COGS: cost of goods sold, cost of sales");
        assert_eq!(
            v.missing,
            vec![MissingComponent::new("COGS", &["cost of goods sold", "cost of sales"])]
        );
        let v = parse_verdict("'interest expense' ('interest paid', 'finance costs'), 'principal repayments'");
        assert_eq!(
            v.missing,
            vec![
                MissingComponent::new("interest expense", &["interest paid", "finance costs"]),
                MissingComponent::new("principal repayments", &[]),
            ]
        );
        let v = parse_verdict("- COGS: cost of sales\n- inventory: stock");
        assert_eq!(v.missing.len(), 2);
        assert_eq!(v.missing[1], MissingComponent::new("inventory", &["stock"]));
        let v = parse_verdict("...");
        assert_eq!(v.kind, VerdictKind::Missing);
        assert_eq!(v.missing, vec![MissingComponent::new("...", &[])]);
    }

    #[test]
    fn round_queries() {
        let q = build_round_query("What is the DSCR in 2023?", "EBITDA / (Interest Expense + Principal Repayments)", &[]);
        assert_eq!(q, "What is the DSCR in 2023?; EBITDA; Interest Expense; Principal Repayments");
        let q = build_round_query(
            "What is the inventory turnover?",
            "COGS / average inventory",
            &[MissingComponent::new("COGS", &["cost of goods sold", "cost of sales"])],
        );
        for phrase in ["COGS", "cost of goods sold", "cost of sales"] {
            assert_eq!(q.matches(phrase).count(), 1, "{phrase} in {q}");
        }
        let q = build_round_query("What is the DSCR?", "DSCR = EBITDA / debt service", &[]);
        assert_eq!(q.matches("DSCR").count(), 1);
    }

    #[test]
    fn feedback_reaches_expansion_prompt() {
        let c = client(vec![ScriptRule::new(Matcher::contains("interest expense"), "EBITDA / (Interest Expense)")]);
        let mut usage = RunUsage::default();
        let f = expand(
            &c,
            &PromptTemplates::default(),
            "DSCR?",
            &[MissingComponent::new("interest expense", &[])],
            2,
            &mut usage,
        )
        .unwrap();
        assert_eq!(f.formula_text, "EBITDA / (Interest Expense)");
        assert_eq!(f.source_round, 2);
        assert_eq!(usage.llm_calls, 1);
    }

    #[test]
    fn extraction_retry_once() {
        let c = client(vec![
            ScriptRule::new(Matcher::contains("State only the final numerical answer"), "{{2.5}}"),
            ScriptRule::new(Matcher::contains("Question:"), "It is about two and a half."),
        ]);
        let mut usage = RunUsage::default();
        let out = solve(&c, &PromptTemplates::default(), "Q?", "a/b", "ctx", &mut usage).unwrap();
        assert_eq!(value(&out.answer), 2.5);
        assert!(!out.extraction_failed);
        assert_eq!(usage.llm_calls, 2);

        let c = client(vec![ScriptRule::new(Matcher::contains("Question:"), "no idea")]);
        let out = solve(&c, &PromptTemplates::default(), "Q?", "a/b", "ctx", &mut RunUsage::default()).unwrap();
        assert_eq!(out.answer, SolverAnswer::Insufficient);
        assert!(out.extraction_failed);
    }

    fn index(n: u32) -> crate::retrieval::SparseIndex {
        // Page p mentions "revenue" p times, so rank order is fixed.
        let units = (1..=n)
            .map(|p| {
                let text = format!("{} filler{p}", "revenue ".repeat(p as usize));
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

    #[test]
    fn exclusion_and_budget() {
        let idx = index(40);
        let top30 = idx.search("revenue", 30).unwrap();
        let first = retrieve_round(&idx, "revenue", 15, &BTreeSet::new(), 75).unwrap();
        assert_eq!(first, top30[..15].to_vec());
        let held: BTreeSet<String> = first.iter().map(|h| h.unit_id.clone()).collect();
        let second = retrieve_round(&idx, "revenue", 15, &held, 60).unwrap();
        assert_eq!(second, top30[15..].to_vec());
        assert_eq!(retrieve_round(&idx, "revenue", 15, &held, 3).unwrap().len(), 3);
        assert!(retrieve_round(&idx, "!!!", 15, &held, 3).unwrap().is_empty());
    }
}
