use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::sampling::{sample_pages, PageSamplingPlan};
use crate::corpus::Report;
use crate::llm::{ChatMessage, LlmClient, LlmError};

/// QA generation prompt. `{max_pairs}` is the only slot; the sampled pages
/// are appended after it.
pub const GENERATION_PROMPT: &str = r#"You are a seasoned financial analyst. Your task is to read a company's annual report (provided below in Markdown) and generate challenging, multi-page numerical reasoning questions and answers.
- For each QA pair, first **think step by step** about which line items you need and on which pages they appear.
- Show your chain-of-thought (labeled “Thought: …”) to justify each calculation.
- Then give the final answer in a clear formulaic layout.

### Examples
Q1: What is the Inventory turnover ratio in percentage of the company in 2002?
A1: Inventory turnover ratio = COGS cost of goods sold / average inventory = 4139/[(45+11)/2] = 147.82

Q2: What is the Debt Service Coverage Ratio (DSCR) ratio in percentage of the company in 2002?
A2: Debt Service Coverage Ratio (DSCR) ratio = EBITDA earnings before interest,taxes,depreciation and amortization/ (Interest Expense+Principal Repayments) = 17 / (11+0) = 1.55

Q3: What is the Altman Z-Score in percentage of the company in 2002?
A3: Altman Z-Score = 1.2*(Working Capital/Total Assets) + 1.4*(Retained Earnings/Total Assets) + 3.3*(EBITDA/Total Assets) + 0.6*(Market Value of Equity/Total Liabilities) + 1.0*(Sales/Total Assets) = 1.2x(3730/6298) + 1.4x(2325/6298) + 3.3x(17/6298) + 0.6x(4925/2203) + 1.0x(5742/6298) = 3.49

### Now: Generate **{max_pairs}** new QA pairs in this exact format, each requiring data from at least two different pages of the provided report.
Be sure to:
- Prepend each reasoning with “Thought:”
- Cite the page numbers in your chain-of-thought.
- Show each formula calculation step by step.
- Deliver the final answer as python code based on the formula under the concept of rounding to two decimal places.
- Run the code to get the final answer.
- Data must strictly come from *at least 2 to 3 different pages*.
- If the page is already used in the previous question, it is not allowed to be used again.
- Present your response in a strictly structured format through the json format below:
{
  "id": "unique_id_for_this_qa_pair",
  "company": "Company Name",
  "year": "Year of the report",
  "question": "What is the ...?",
  "type": "If the data sources are from table, please answer 'table'; if the data sources are from text, please answer 'text'; if the data sources are from both table and text, please answer 'mixed'",
  "thoughts": "Thought: ...",
  "page_numbers": [1, 2, 3],
  "python_code": "Based on the formula under the concept of strictly rounding to two decimal places.",
  "answer": "Numerical answer here"
}
IMPORTANT: Return only the raw JSON array—no Markdown fences!"#;

/// One generated record, as the model wrote it. Nothing is validated beyond
/// the shape needed to carry it to the filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawQA {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_id: Option<String>,
    pub company: String,
    pub year: String,
    pub question: String,
    #[serde(rename = "type")]
    pub question_type: String,
    pub thoughts: String,
    pub page_numbers: Vec<u32>,
    #[serde(rename = "python_code")]
    pub program_source: String,
    pub answer: String,
}

impl RawQA {
    /// Lenient decode of one array element: numbers are accepted where the
    /// schema has strings, and missing text fields become empty.
    pub fn from_value(v: &Value) -> Option<Self> {
        let obj = v.as_object()?;
        fn text(obj: &Map<String, Value>, key: &str) -> Option<String> {
            match obj.get(key) {
                Some(Value::String(s)) => Some(s.clone()),
                Some(Value::Number(n)) => Some(n.to_string()),
                None | Some(Value::Null) => Some(String::new()),
                Some(_) => None,
            }
        }
        let page_numbers = match obj.get("page_numbers")? {
            Value::Array(items) => items
                .iter()
                .map(|p| match p {
                    Value::Number(n) => n.as_u64().and_then(|n| u32::try_from(n).ok()),
                    Value::String(s) => s.trim().parse().ok(),
                    _ => None,
                })
                .collect::<Option<Vec<u32>>>()?,
            _ => return None,
        };
        let question = text(obj, "question")?;
        if question.trim().is_empty() {
            return None;
        }
        Some(RawQA {
            id: text(obj, "id")?,
            report_id: obj.get("report_id").and_then(Value::as_str).map(str::to_string),
            company: text(obj, "company")?,
            year: text(obj, "year")?,
            question,
            question_type: text(obj, "type")?,
            thoughts: text(obj, "thoughts")?,
            page_numbers,
            program_source: text(obj, "python_code")?,
            answer: text(obj, "answer")?,
        })
    }
}

/// Generated records for one report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationBatch {
    pub report_id: String,
    pub plan: PageSamplingPlan,
    pub items: Vec<RawQA>,
    /// Elements (or whole replies) that could not be decoded.
    pub parse_errors: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Renders the generation prompt with the sampled pages inlined under their
/// page delimiters.
pub fn render_generation_prompt(report: &Report, plan: &PageSamplingPlan, max_pairs: usize) -> String {
    let mut prompt = GENERATION_PROMPT.replace("{max_pairs}", &max_pairs.to_string());
    prompt.push_str("\n\n");
    for number in plan.pages() {
        if let Some(page) = report.page(number) {
            prompt.push_str(&format!("<!-- page {number} -->\n{}\n", page.text));
        }
    }
    prompt
}

fn strip_fences(reply: &str) -> &str {
    let t = reply.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    // Drop the info string ("json") on the opening fence line.
    let body = rest.split_once('\n').map_or("", |(_, b)| b);
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

/// Decodes a model reply into records. Returns the records, the number of
/// dropped elements and, when the reply as a whole is unusable, a diagnostic.
pub fn parse_generation_reply(reply: &str) -> (Vec<RawQA>, usize, Option<String>) {
    let body = strip_fences(reply);
    let parsed = serde_json::from_str::<Value>(body).or_else(|first| {
        // Prose around the array: fall back to the outermost brackets.
        match (body.find('['), body.rfind(']')) {
            (Some(a), Some(b)) if a < b => serde_json::from_str::<Value>(&body[a..=b]).map_err(|_| first),
            _ => Err(first),
        }
    });
    let elements = match parsed {
        Ok(Value::Array(items)) => items,
        Ok(obj @ Value::Object(_)) => vec![obj],
        Ok(other) => return (Vec::new(), 1, Some(format!("reply is JSON but not an array: {other}"))),
        Err(e) => return (Vec::new(), 1, Some(format!("reply is not JSON: {e}"))),
    };
    let mut items = Vec::new();
    let mut dropped = 0;
    for el in &elements {
        match RawQA::from_value(el) {
            Some(qa) => items.push(qa),
            None => dropped += 1,
        }
    }
    (items, dropped, None)
}

/// Asks the model for up to `max_pairs` QA records over the sampled pages.
pub fn generate_qa(
    report: &Report,
    plan: &PageSamplingPlan,
    llm: &LlmClient,
    max_pairs: usize,
) -> Result<GenerationBatch, LlmError> {
    let prompt = render_generation_prompt(report, plan, max_pairs);
    let completion = llm.complete(&[ChatMessage::user(prompt)])?;
    let (mut items, parse_errors, diagnostic) = parse_generation_reply(&completion.text);
    if let Some(d) = &diagnostic {
        log::warn!("{}: {d}", report.report_id);
    }
    for (i, qa) in items.iter_mut().enumerate() {
        qa.report_id = Some(report.report_id.clone());
        if qa.id.trim().is_empty() {
            qa.id = format!("{}-{}", report.report_id, i + 1);
        }
    }
    Ok(GenerationBatch {
        report_id: report.report_id.clone(),
        plan: plan.clone(),
        items,
        parse_errors,
        diagnostic,
    })
}

/// Samples and generates for every report in parallel. Report `i` uses seed
/// `seed + i` so results do not depend on scheduling.
pub fn generate_corpus(
    reports: &[Report],
    llm: &LlmClient,
    pages_per_report: usize,
    max_pairs: usize,
    seed: u64,
) -> Vec<Result<GenerationBatch, LlmError>> {
    reports
        .par_iter()
        .enumerate()
        .map(|(i, report)| {
            let plan = sample_pages(report, pages_per_report, seed.wrapping_add(i as u64));
            generate_qa(report, &plan, llm, max_pairs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::corpus::PageChunk;
    use crate::llm::{Matcher, ProviderConfig, ScriptRule, ScriptedBackend};

    const TWO: &str = r#"[
      {"id":"q1","company":"Acme","year":"2023","question":"What is the DSCR?","type":"table",
       "thoughts":"Thought: page 3 and page 9","page_numbers":[3,9],"python_code":"print(round(17/(11+0),2))","answer":"1.55"},
      {"id":"q2","company":"Acme","year":2023,"question":"What is the current ratio?","type":"mixed",
       "thoughts":"Thought: ...","page_numbers":[4,"7"],"python_code":"120/80","answer":1.5}
    ]"#;

    fn report() -> Report {
        Report {
            report_id: "acme_2023".into(),
            company: "Acme".into(),
            fiscal_year: 2023,
            pages: (1..=12).map(|p| PageChunk::new(p, format!("text of page {p}"))).collect(),
        }
    }

    fn client(reply: &str) -> LlmClient {
        LlmClient::new(
            ProviderConfig::default(),
            Arc::new(ScriptedBackend::repeatable(vec![ScriptRule::new(
                Matcher::contains("seasoned financial analyst"),
                reply,
            )])),
        )
    }

    #[test]
    fn decodes_schema_array() {
        let r = report();
        let plan = sample_pages(&r, 6, 0);
        let batch = generate_qa(&r, &plan, &client(TWO), 10).unwrap();
        assert_eq!(batch.items.len(), 2);
        assert_eq!(batch.parse_errors, 0);
        assert_eq!(batch.items[1].year, "2023");
        assert_eq!(batch.items[1].answer, "1.5");
        assert_eq!(batch.items[1].page_numbers, vec![4, 7]);
        assert_eq!(batch.items[0].report_id.as_deref(), Some("acme_2023"));
    }

    #[test]
    fn strips_fences() {
        let fenced = format!("```json\n{TWO}\n```");
        let (items, dropped, diag) = parse_generation_reply(&fenced);
        assert_eq!((items.len(), dropped, diag), (2, 0, None));
    }

    #[test]
    fn not_json_is_an_empty_batch() {
        let r = report();
        let plan = sample_pages(&r, 6, 0);
        let batch = generate_qa(&r, &plan, &client("not json"), 10).unwrap();
        assert!(batch.items.is_empty());
        assert_eq!(batch.parse_errors, 1);
        assert!(batch.diagnostic.is_some());
    }

    #[test]
    fn malformed_elements_are_dropped() {
        let (items, dropped, _) =
            parse_generation_reply(r#"[1, {"question":"q","page_numbers":"x"}, {"question":"ok","page_numbers":[1,2]}]"#);
        assert_eq!(items.len(), 1);
        assert_eq!(dropped, 2);
    }

    #[test]
    fn prompt_inlines_sampled_pages() {
        let r = report();
        let plan = sample_pages(&r, 3, 5);
        let prompt = render_generation_prompt(&r, &plan, 4);
        assert!(prompt.contains("Generate **4** new QA pairs"));
        assert!(prompt.ends_with('\n'));
        for p in plan.pages() {
            assert!(prompt.contains(&format!("<!-- page {p} -->\ntext of page {p}\n")));
        }
        assert_eq!(prompt.matches("<!-- page ").count(), 3);
    }
}
