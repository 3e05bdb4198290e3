use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{render_prompt, ChatBackend, ChatMessage, LlmError, ProviderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConsumptionMode {
    /// A rule answers every matching prompt.
    #[default]
    Repeatable,
    /// A rule answers once; later prompts fall through to the next match.
    ConsumeOnce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Every listed substring occurs in the rendered prompt.
    Contains(Vec<String>),
    /// SHA-256 (hex) of the rendered prompt.
    PromptSha256(String),
}

impl Matcher {
    pub fn contains(s: impl Into<String>) -> Self {
        Matcher::Contains(vec![s.into()])
    }

    pub fn all_of<I, S>(parts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Matcher::Contains(parts.into_iter().map(Into::into).collect())
    }

    fn matches(&self, prompt: &str, prompt_hash: &str) -> bool {
        match self {
            Matcher::Contains(parts) => parts.iter().all(|p| prompt.contains(p.as_str())),
            Matcher::PromptSha256(h) => h.eq_ignore_ascii_case(prompt_hash),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    pub response: String,
}

impl ScriptRule {
    pub fn new(matcher: Matcher, response: impl Into<String>) -> Self {
        Self {
            matcher,
            response: response.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    mode: ConsumptionMode,
    rules: Vec<ScriptRule>,
}

/// Canned replies keyed by prompt content. The first eligible matching rule
/// wins. A prompt that matches nothing is an error, never a silent default.
#[derive(Debug)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    mode: ConsumptionMode,
    consumed: Mutex<Vec<bool>>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>, mode: ConsumptionMode) -> Self {
        let n = rules.len();
        Self {
            rules,
            mode,
            consumed: Mutex::new(vec![false; n]),
        }
    }

    pub fn repeatable(rules: Vec<ScriptRule>) -> Self {
        Self::new(rules, ConsumptionMode::Repeatable)
    }

    pub fn consume_once(rules: Vec<ScriptRule>) -> Self {
        Self::new(rules, ConsumptionMode::ConsumeOnce)
    }

    /// Reads `{"mode": ..., "rules": [{"match": {...}, "response": ...}]}`.
    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| LlmError::Decode(format!("{}: {e}", path.display())))?;
        let file: ScriptFile =
            serde_json::from_str(&text).map_err(|e| LlmError::Decode(format!("{}: {e}", path.display())))?;
        Ok(Self::new(file.rules, file.mode))
    }

    /// Rules not yet consumed (always all of them in repeatable mode).
    pub fn remaining(&self) -> usize {
        self.consumed.lock().unwrap().iter().filter(|c| !**c).count()
    }

    pub fn prompt_hash(messages: &[ChatMessage]) -> String {
        hex::encode(Sha256::digest(render_prompt(messages).as_bytes()))
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, _config: &ProviderConfig, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let prompt = render_prompt(messages);
        let hash = Self::prompt_hash(messages);
        let mut consumed = self.consumed.lock().unwrap();
        for (i, rule) in self.rules.iter().enumerate() {
            if consumed[i] || !rule.matcher.matches(&prompt, &hash) {
                continue;
            }
            if self.mode == ConsumptionMode::ConsumeOnce {
                consumed[i] = true;
            }
            return Ok(rule.response.clone());
        }
        let excerpt: String = prompt.chars().rev().take(240).collect::<Vec<_>>().into_iter().rev().collect();
        Err(LlmError::Unscripted(format!("...{excerpt}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ask(b: &ScriptedBackend, text: &str) -> Result<String, LlmError> {
        b.complete(&ProviderConfig::default(), &[ChatMessage::user(text)])
    }

    #[test]
    fn substring_match() {
        let b = ScriptedBackend::repeatable(vec![ScriptRule::new(
            Matcher::contains("DSCR"),
            "EBITDA / (Interest Expense + Principal Repayments)",
        )]);
        assert_eq!(
            ask(&b, "What is the DSCR in 2023?").unwrap(),
            "EBITDA / (Interest Expense + Principal Repayments)"
        );
        assert_eq!(ask(&b, "DSCR again").unwrap().len(), 50);
    }

    #[test]
    fn unmatched_fails_loudly() {
        let b = ScriptedBackend::repeatable(vec![ScriptRule::new(Matcher::contains("x"), "y")]);
        assert!(matches!(ask(&b, "nothing"), Err(LlmError::Unscripted(_))));
    }

    #[test]
    fn consume_once_walks_the_script() {
        let b = ScriptedBackend::consume_once(vec![
            ScriptRule::new(Matcher::contains("q"), "first"),
            ScriptRule::new(Matcher::contains("q"), "second"),
        ]);
        assert_eq!(ask(&b, "q").unwrap(), "first");
        assert_eq!(ask(&b, "q").unwrap(), "second");
        assert!(ask(&b, "q").is_err());
        assert_eq!(b.remaining(), 0);
    }

    #[test]
    fn hash_match() {
        let msgs = [ChatMessage::user("exact prompt")];
        let b = ScriptedBackend::repeatable(vec![ScriptRule::new(
            Matcher::PromptSha256(ScriptedBackend::prompt_hash(&msgs)),
            "hit",
        )]);
        assert_eq!(b.complete(&ProviderConfig::default(), &msgs).unwrap(), "hit");
        assert!(ask(&b, "exact prompt ").is_err());
    }

    #[test]
    fn script_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        fs::write(
            &path,
            r#"{"mode":"consume_once","rules":[{"match":{"contains":["a","b"]},"response":"ab"}]}"#,
        )
        .unwrap();
        let b = ScriptedBackend::from_file(&path).unwrap();
        assert!(ask(&b, "a only").is_err());
        assert_eq!(ask(&b, "a and b").unwrap(), "ab");
    }
}
