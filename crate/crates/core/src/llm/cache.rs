use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, Completion, LlmError};

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    model: String,
    response: String,
}

/// Content-addressed response cache: one `{key}.json` file per request when
/// backed by a directory, otherwise memory only. Reads are concurrent, writes
/// are serialized and atomic (write to temp, then rename).
#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<BTreeMap<String, String>>,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(dir: &Path) -> Result<Self, LlmError> {
        fs::create_dir_all(dir).map_err(|e| LlmError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            ..Self::default()
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(v) = self.memory.lock().unwrap().get(key) {
            return Some(v.clone());
        }
        let path = self.dir.as_ref()?.join(format!("{key}.json"));
        let entry: CacheEntry = serde_json::from_str(&fs::read_to_string(path).ok()?).ok()?;
        if entry.key != key {
            return None;
        }
        self.memory.lock().unwrap().insert(key.to_string(), entry.response.clone());
        Some(entry.response)
    }

    pub fn put(&self, key: &str, model: &str, response: &str) -> Result<(), LlmError> {
        self.memory.lock().unwrap().insert(key.to_string(), response.to_string());
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let _guard = self.write_lock.lock().unwrap();
        let entry = CacheEntry {
            key: key.to_string(),
            model: model.to_string(),
            response: response.to_string(),
        };
        let tmp = dir.join(format!("{key}.json.tmp"));
        let dest = dir.join(format!("{key}.json"));
        fs::write(&tmp, serde_json::to_vec_pretty(&entry).expect("entry serializes"))
            .and_then(|_| fs::rename(&tmp, &dest))
            .map_err(|e| LlmError::Cache(format!("{}: {e}", dest.display())))
    }

    /// Number of entries on disk (or in memory when not directory-backed).
    pub fn len(&self) -> usize {
        match &self.dir {
            Some(dir) => fs::read_dir(dir)
                .map(|it| {
                    it.filter_map(Result::ok)
                        .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                        .count()
                })
                .unwrap_or(0),
            None => self.memory.lock().unwrap().len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Append-only JSON-lines audit log of every completion.
pub struct RequestLog {
    file: Mutex<File>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    key: &'a str,
    model: &'a str,
    cached: bool,
    prompt_tokens: usize,
    completion_tokens: usize,
    messages: &'a [ChatMessage],
    response: &'a str,
}

impl RequestLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }

    pub(super) fn append(&self, key: &str, model: &str, messages: &[ChatMessage], c: &Completion) {
        let line = LogLine {
            key,
            model,
            cached: c.cached,
            prompt_tokens: c.prompt_tokens,
            completion_tokens: c.completion_tokens,
            messages,
            response: &c.text,
        };
        let mut f = self.file.lock().unwrap();
        let text = serde_json::to_string(&line).expect("log line serializes");
        if let Err(e) = writeln!(f, "{text}") {
            log::warn!("request log write failed: {e}");
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::super::{LlmClient, Matcher, ProviderConfig, ScriptRule, ScriptedBackend};
    use super::*;

    #[test]
    fn second_identical_request_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ResponseCache::open(dir.path()).unwrap());
        let backend = Arc::new(ScriptedBackend::repeatable(vec![ScriptRule::new(
            Matcher::contains("DSCR"),
            "{{1.55}}",
        )]));
        let log_path = dir.path().join("log/requests.jsonl");
        let client = LlmClient::new(ProviderConfig::default(), backend)
            .with_cache(cache.clone())
            .with_log(Arc::new(RequestLog::open(&log_path).unwrap()));
        let msgs = [ChatMessage::user("DSCR?")];
        let first = client.complete(&msgs).unwrap();
        let second = client.complete(&msgs).unwrap();
        assert!(!first.cached);
        assert!(second.cached);
        assert_eq!(first.text, second.text);
        assert_eq!(client.backend_calls(), 1);
        assert_eq!(cache.len(), 1);
        assert_eq!(fs::read_to_string(&log_path).unwrap().lines().count(), 2);

        // A new process reading the same directory needs no backend at all.
        let reopened = Arc::new(ResponseCache::open(dir.path()).unwrap());
        let empty = Arc::new(ScriptedBackend::repeatable(vec![]));
        let offline = LlmClient::new(ProviderConfig::default(), empty).with_cache(reopened);
        assert_eq!(offline.complete(&msgs).unwrap().text, "{{1.55}}");
        assert_eq!(offline.backend_calls(), 0);
    }

    #[test]
    fn overflow_makes_no_call() {
        let backend = Arc::new(ScriptedBackend::repeatable(vec![ScriptRule::new(Matcher::contains(""), "x")]));
        let config = ProviderConfig {
            max_input_tokens: 3,
            ..ProviderConfig::default()
        };
        let client = LlmClient::new(config, backend);
        let err = client.complete(&[ChatMessage::user("one two three four")]).unwrap_err();
        assert_eq!(err, LlmError::ContextOverflow { tokens: 4, limit: 3 });
        assert_eq!(client.backend_calls(), 0);
    }
}
