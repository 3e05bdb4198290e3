//! Answer normalization and scoring.
//!
//! Predictions and gold answers are compared three ways:
//!
//! - **Exact match** on the canonical string produced by [`normalize_answer`].
//! - **Tolerance accuracy**: `|pred - gold| <= a_tol + r_tol * max(|gold|, eps)`.
//! - **Token F1** over whitespace/punctuation tokens, with decimal numbers kept
//!   as single tokens.
//!
//! Scores are aggregated into an [`EvalReport`] with per-difficulty and
//! per-question-type breakdowns.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot aggregate an empty score list")]
    EmptyScores,
}

/// Tolerance constants for numeric comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConstants {
    pub a_tol: f64,
    pub r_tol: f64,
    pub epsilon: f64,
}

impl Default for MetricConstants {
    fn default() -> Self {
        Self {
            a_tol: 1e-4,
            r_tol: 1e-3,
            epsilon: 1e-12,
        }
    }
}

/// How a trailing `%` is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PercentMode {
    /// Keep the `%` sign in the canonical string; the numeric value is the
    /// number in front of it.
    #[default]
    AsGiven,
    /// `12.5%` becomes `0.125`.
    Fraction,
    /// `12.5%` becomes `12.5`.
    Percent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedAnswer {
    pub canonical: String,
    pub value: Option<f64>,
    pub percent_mode: PercentMode,
}

impl NormalizedAnswer {
    pub fn is_numeric(&self) -> bool {
        self.value.is_some()
    }
}

const CURRENCY: [char; 3] = ['$', '€', '£'];

/// Normalizes a raw answer string.
///
/// Commas, currency symbols and whitespace are removed, `(x)` becomes `-x`,
/// and numeric strings are rendered canonically (no leading zeros, no
/// trailing fractional zeros, no `-0`).
pub fn normalize_answer(raw: &str, mode: PercentMode) -> NormalizedAnswer {
    let mut s: String = raw
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ',' && !CURRENCY.contains(c))
        .map(|c| if c == '\u{2212}' { '-' } else { c })
        .collect();

    let mut negative = false;
    if s.len() >= 2 && s.starts_with('(') && s.ends_with(')') {
        s = s[1..s.len() - 1].to_string();
        negative = true;
    }
    // "-$5" style input loses its currency sign above; "$-5" too.
    let mut percent = false;
    if let Some(stripped) = s.strip_suffix('%') {
        s = stripped.to_string();
        percent = true;
    }
    if negative {
        s = match s.strip_prefix('-') {
            Some(rest) => rest.to_string(),
            None => format!("-{s}"),
        };
    }

    match canonical_decimal(&s) {
        Some(mut canon) => {
            if percent && mode == PercentMode::Fraction {
                canon = shift_decimal_left(&canon, 2);
            }
            let value = canon.parse::<f64>().ok();
            let canonical = if percent && mode == PercentMode::AsGiven {
                format!("{canon}%")
            } else {
                canon
            };
            NormalizedAnswer {
                canonical,
                value,
                percent_mode: mode,
            }
        }
        None => {
            let mut canonical = s;
            if percent {
                canonical.push('%');
            }
            NormalizedAnswer {
                canonical,
                value: None,
                percent_mode: mode,
            }
        }
    }
}

/// Canonical rendering of a plain decimal literal, or `None` if `s` is not one.
fn canonical_decimal(s: &str) -> Option<String> {
    let (neg, body) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.bytes().all(|b| b.is_ascii_digit()) || !frac_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let int_trim = int_part.trim_start_matches('0');
    let int_trim = if int_trim.is_empty() { "0" } else { int_trim };
    let frac_trim = frac_part.trim_end_matches('0');
    let mut out = String::new();
    let is_zero = int_trim == "0" && frac_trim.is_empty();
    if neg && !is_zero {
        out.push('-');
    }
    out.push_str(int_trim);
    if !frac_trim.is_empty() {
        out.push('.');
        out.push_str(frac_trim);
    }
    Some(out)
}

/// Divides a canonical decimal string by `10^places` without going through floats.
fn shift_decimal_left(canon: &str, places: usize) -> String {
    let (neg, body) = match canon.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, canon),
    };
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    let padded = format!("{}{}", "0".repeat(places), int_part);
    let split = padded.len() - places;
    let shifted = format!("{}.{}{}", &padded[..split], &padded[split..], frac_part);
    let out = canonical_decimal(&shifted).expect("shifted decimal stays well-formed");
    if neg && out != "0" {
        format!("-{out}")
    } else {
        out
    }
}

/// Exact match on canonical strings.
pub fn exact_match(pred: &NormalizedAnswer, gold: &NormalizedAnswer) -> bool {
    pred.canonical == gold.canonical
}

/// `|pred - gold| <= a_tol + r_tol * max(|gold|, eps)`.
pub fn tolerance_correct(pred: f64, gold: f64, c: &MetricConstants) -> bool {
    if !pred.is_finite() || !gold.is_finite() {
        return false;
    }
    (pred - gold).abs() <= c.a_tol + c.r_tol * gold.abs().max(c.epsilon)
}

/// Splits on whitespace and punctuation; a `.` between two digits and a `,`
/// between two digits stay inside the token (decimal point, digit grouping).
fn f1_tokens(text: &str) -> Vec<String> {
    let norm = normalize_answer(text, PercentMode::AsGiven);
    if norm.is_numeric() {
        return vec![norm.canonical];
    }
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let between_digits = i > 0
            && i + 1 < chars.len()
            && chars[i - 1].is_ascii_digit()
            && chars[i + 1].is_ascii_digit();
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if c == '.' && between_digits {
            cur.push('.');
        } else if c == ',' && between_digits {
            // digit grouping, dropped
        } else if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
        .into_iter()
        .map(|t| canonical_decimal(&t).unwrap_or(t))
        .collect()
}

/// Multiset token F1 between two answer strings.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = f1_tokens(pred);
    let g = f1_tokens(gold);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in &g {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "Easy",
            Difficulty::Medium => "Medium",
            Difficulty::Hard => "Hard",
        })
    }
}

/// Easy: at most one evidence table. Medium: two. Hard: three or more.
pub fn bucket_difficulty(n_evidence_tables: u32) -> Difficulty {
    match n_evidence_tables {
        0 | 1 => Difficulty::Easy,
        2 => Difficulty::Medium,
        _ => Difficulty::Hard,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Table,
    Text,
    Mixed,
}

impl QuestionType {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "table" => Some(Self::Table),
            "text" => Some(Self::Text),
            "mixed" => Some(Self::Mixed),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Table => "table",
            Self::Text => "text",
            Self::Mixed => "mixed",
        }
    }
}

/// Failure categories for manual error analysis. Labels are assigned by hand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    /// At least one required page was not retrieved.
    RetrievalFailure,
    /// An incorrect page among the retrieved candidates was used.
    EvidenceUtilization,
    /// A wrong table entry was used.
    ValueExtraction,
    /// Incorrect arithmetic or formulation.
    ReasoningCalculation,
}

/// Which comparison produced the tolerance verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchedVariant {
    AsGiven,
    PredTimes100,
    PredDiv100,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub em: u8,
    pub tol_correct: u8,
    pub f1: f64,
    pub difficulty: Difficulty,
    pub question_type: QuestionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_variant: Option<MatchedVariant>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<String>,
}

/// Everything needed to score one prediction.
#[derive(Debug, Clone)]
pub struct ScoreInput<'a> {
    pub id: &'a str,
    pub prediction: &'a str,
    pub gold: &'a str,
    /// Explicit percent flag carried by the instance, if any.
    pub percent_flag: Option<PercentMode>,
    pub difficulty: Difficulty,
    pub question_type: QuestionType,
}

/// Scores one prediction.
///
/// With an explicit percent flag both sides are normalized in that mode.
/// Without one, comparison is as-given, and the tolerance check additionally
/// accepts the prediction scaled by 100 or 1/100; the variant that matched is
/// recorded.
pub fn score_instance(input: &ScoreInput<'_>, c: &MetricConstants) -> InstanceScore {
    let mode = input.percent_flag.unwrap_or(PercentMode::AsGiven);
    let pred = normalize_answer(input.prediction, mode);
    let gold = normalize_answer(input.gold, mode);
    let em = exact_match(&pred, &gold);
    let mut reasons = Vec::new();
    let mut matched_variant = None;
    let tol = match (pred.value, gold.value) {
        (Some(p), Some(g)) => {
            if tolerance_correct(p, g, c) || em {
                matched_variant = Some(MatchedVariant::AsGiven);
                true
            } else if input.percent_flag.is_none() && tolerance_correct(p * 100.0, g, c) {
                matched_variant = Some(MatchedVariant::PredTimes100);
                true
            } else if input.percent_flag.is_none() && tolerance_correct(p / 100.0, g, c) {
                matched_variant = Some(MatchedVariant::PredDiv100);
                true
            } else {
                false
            }
        }
        (None, _) => {
            reasons.push("non_numeric_prediction".to_string());
            false
        }
        (_, None) => {
            reasons.push("non_numeric_gold".to_string());
            false
        }
    };
    InstanceScore {
        id: input.id.to_string(),
        em: em as u8,
        // exact string agreement of two numerics always passes tolerance
        tol_correct: (tol || (em && pred.is_numeric())) as u8,
        f1: token_f1(input.prediction, input.gold),
        difficulty: input.difficulty,
        question_type: input.question_type,
        matched_variant,
        reasons,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub count: usize,
    pub em: f64,
    pub tol_acc: f64,
    pub f1: f64,
}

/// Aggregate scores as percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub em: f64,
    pub tol_acc: f64,
    pub f1: f64,
    pub per_difficulty: BTreeMap<Difficulty, BucketSummary>,
    pub per_type: BTreeMap<QuestionType, BucketSummary>,
}

fn summarize<'a>(scores: impl Iterator<Item = &'a InstanceScore>) -> BucketSummary {
    let mut count = 0usize;
    let mut em = 0u64;
    let mut tol = 0u64;
    let mut f1s = Vec::new();
    for s in scores {
        count += 1;
        em += s.em as u64;
        tol += s.tol_correct as u64;
        f1s.push(s.f1);
    }
    // Sum in sorted order so the result does not depend on input order.
    f1s.sort_by(f64::total_cmp);
    let f1_sum: f64 = f1s.iter().sum();
    let n = count.max(1) as f64;
    BucketSummary {
        count,
        em: em as f64 / n * 100.0,
        tol_acc: tol as f64 / n * 100.0,
        f1: f1_sum / n * 100.0,
    }
}

pub fn aggregate(scores: &[InstanceScore]) -> Result<EvalReport, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyScores);
    }
    let all = summarize(scores.iter());
    let mut per_difficulty = BTreeMap::new();
    for d in [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard] {
        let bucket = summarize(scores.iter().filter(|s| s.difficulty == d));
        if bucket.count > 0 {
            per_difficulty.insert(d, bucket);
        }
    }
    let mut per_type = BTreeMap::new();
    for t in [QuestionType::Table, QuestionType::Text, QuestionType::Mixed] {
        let bucket = summarize(scores.iter().filter(|s| s.question_type == t));
        if bucket.count > 0 {
            per_type.insert(t, bucket);
        }
    }
    Ok(EvalReport {
        count: all.count,
        em: all.em,
        tol_acc: all.tol_acc,
        f1: all.f1,
        per_difficulty,
        per_type,
    })
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl EvalReport {
    /// JSON rendering with percentages rounded to two decimals.
    pub fn to_json(&self) -> serde_json::Value {
        let bucket = |b: &BucketSummary| {
            serde_json::json!({
                "count": b.count,
                "em": round2(b.em),
                "tol_acc": round2(b.tol_acc),
                "f1": round2(b.f1),
            })
        };
        let per_difficulty: serde_json::Map<String, serde_json::Value> = self
            .per_difficulty
            .iter()
            .map(|(d, b)| (d.to_string(), bucket(b)))
            .collect();
        let per_type: serde_json::Map<String, serde_json::Value> = self
            .per_type
            .iter()
            .map(|(t, b)| (t.as_str().to_string(), bucket(b)))
            .collect();
        serde_json::json!({
            "count": self.count,
            "em": round2(self.em),
            "tol_acc": round2(self.tol_acc),
            "f1": round2(self.f1),
            "per_difficulty": per_difficulty,
            "per_type": per_type,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "n={}  EM {:.2}  Tol.Acc {:.2}  F1 {:.2}",
            self.count, self.em, self.tol_acc, self.f1
        )?;
        for (d, b) in &self.per_difficulty {
            writeln!(f, "  {d:<6} ({:>5})  EM {:.2}", b.count, b.em)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(s: &str) -> NormalizedAnswer {
        normalize_answer(s, PercentMode::AsGiven)
    }

    #[test]
    fn parentheses_negative() {
        let n = norm("(1,234)");
        assert_eq!(n.canonical, "-1234");
        assert_eq!(n.value, Some(-1234.0));
    }

    #[test]
    fn currency_and_commas() {
        assert_eq!(norm("$4,139").canonical, "4139");
        assert_eq!(norm(" € 1 000.50 ").canonical, "1000.5");
        assert_eq!(norm("£0.00").canonical, "0");
    }

    #[test]
    fn percent_modes() {
        let f = normalize_answer("12.5%", PercentMode::Fraction);
        assert_eq!(f.canonical, "0.125");
        assert_eq!(f.value, Some(0.125));
        let p = normalize_answer("12.5%", PercentMode::Percent);
        assert_eq!(p.canonical, "12.5");
        let g = normalize_answer("12.5%", PercentMode::AsGiven);
        assert_eq!(g.canonical, "12.5%");
        assert_eq!(g.value, Some(12.5));
        assert_eq!(normalize_answer("(3%)", PercentMode::Fraction).canonical, "-0.03");
    }

    #[test]
    fn non_numeric_has_no_value() {
        let n = norm("abc");
        assert_eq!(n.value, None);
        assert_eq!(n.canonical, "abc");
        assert_eq!(norm("").value, None);
    }

    #[test]
    fn exact_match_examples() {
        assert!(exact_match(&norm("518.75"), &norm("518.75")));
        assert!(exact_match(&norm("518.750"), &norm("518.75")));
        assert!(!exact_match(&norm("0.26"), &norm("0.06")));
        assert!(exact_match(&norm("-0.0"), &norm("0")));
        assert!(exact_match(&norm("007.10"), &norm("7.1")));
    }

    #[test]
    fn tolerance_examples() {
        let c = MetricConstants::default();
        assert!(tolerance_correct(518.80, 518.75, &c));
        assert!(tolerance_correct(0.0, 0.0, &c));
        assert!(!tolerance_correct(0.584, 0.82, &c));
        assert!(!tolerance_correct(f64::NAN, 1.0, &c));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("1.55", "1.55"), 1.0);
        assert!((token_f1("1.55 million", "1.55") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1("", "352"), 0.0);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("$4,139", "4139"), 1.0);
    }

    #[test]
    fn buckets() {
        assert_eq!(bucket_difficulty(0), Difficulty::Easy);
        assert_eq!(bucket_difficulty(1), Difficulty::Easy);
        assert_eq!(bucket_difficulty(2), Difficulty::Medium);
        assert_eq!(bucket_difficulty(3), Difficulty::Hard);
        assert_eq!(bucket_difficulty(9), Difficulty::Hard);
    }

    fn score(id: &str, pred: &str, gold: &str) -> InstanceScore {
        score_instance(
            &ScoreInput {
                id,
                prediction: pred,
                gold,
                percent_flag: None,
                difficulty: Difficulty::Easy,
                question_type: QuestionType::Table,
            },
            &MetricConstants::default(),
        )
    }

    #[test]
    fn dual_accept_percent() {
        let s = score("a", "0.125", "12.5");
        assert_eq!(s.em, 0);
        assert_eq!(s.tol_correct, 1);
        assert_eq!(s.matched_variant, Some(MatchedVariant::PredTimes100));
        let s = score("b", "12.5", "0.125");
        assert_eq!(s.matched_variant, Some(MatchedVariant::PredDiv100));
    }

    #[test]
    fn aggregate_means() {
        let r = aggregate(&[score("a", "1", "1"), score("b", "2", "1")]).unwrap();
        assert_eq!(r.em, 50.0);
        assert_eq!(r.count, 2);
        assert_eq!(r.per_difficulty[&Difficulty::Easy].count, 2);
        assert_eq!(aggregate(&[]), Err(MetricsError::EmptyScores));
    }

    #[test]
    fn report_json_rounds_to_two_decimals() {
        let scores = vec![score("a", "1", "1"), score("b", "2", "1"), score("c", "2", "1")];
        let r = aggregate(&scores).unwrap();
        assert_eq!(r.to_json()["em"], serde_json::json!(33.33));
    }
}
