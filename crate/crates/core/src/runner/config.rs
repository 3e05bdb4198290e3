use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::RunnerError;
use crate::corpus::{PageDelimiter, DEFAULT_DELIMITER};
use crate::ingest::{EdgarConfig, HtmlOptions};
use crate::llm::{ProviderConfig, DEFAULT_API_KEY_ENV};
use crate::metrics::MetricConstants;
use crate::pipelines::{AgentConfig, BaselineKind};
use crate::retrieval::Bm25Params;

/// Which pipeline answers the questions of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    #[default]
    Agent,
    NoContext,
    LongContext,
    SingleRoundRag,
    FixedBudgetRag,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 5] = [
        PipelineKind::Agent,
        PipelineKind::NoContext,
        PipelineKind::LongContext,
        PipelineKind::SingleRoundRag,
        PipelineKind::FixedBudgetRag,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PipelineKind::Agent => "agent",
            PipelineKind::NoContext => "no_context",
            PipelineKind::LongContext => "long_context",
            PipelineKind::SingleRoundRag => "single_round_rag",
            PipelineKind::FixedBudgetRag => "fixed_budget_rag",
        }
    }

    /// Whether the pipeline searches a per-report index.
    pub fn needs_index(&self) -> bool {
        matches!(
            self,
            PipelineKind::Agent | PipelineKind::SingleRoundRag | PipelineKind::FixedBudgetRag
        )
    }
}

impl std::str::FromStr for PipelineKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|p| p.as_str()).collect();
                format!("unknown pipeline {s:?}; expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// OpenAI-compatible chat endpoint from `provider.endpoint`.
    #[default]
    Http,
    /// Canned replies from `backend.script`; never touches the network.
    Scripted,
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "http" => Ok(Self::Http),
            "scripted" => Ok(Self::Scripted),
            other => Err(format!("unknown backend {other:?}; expected http or scripted")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Script file for the scripted backend.
    pub script: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Directory of page-delimited `.md` reports.
    pub corpus: PathBuf,
    /// QA dataset, one JSON object per line.
    pub dataset: PathBuf,
    /// Root of the run tree; each run writes `{output}/{run_id}/`.
    pub output: PathBuf,
    pub index_dir: PathBuf,
    /// Raw downloads from EDGAR.
    pub filings: PathBuf,
    /// Persistent LLM response cache; in-memory only when unset.
    pub cache_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            dataset: "dataset.jsonl".into(),
            output: "runs".into(),
            index_dir: "indices".into(),
            filings: "filings".into(),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// Offline feature hashing; deterministic, no network.
    #[default]
    Hashing,
    /// OpenAI-compatible `/embeddings` endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    pub dimension: usize,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    /// Persist vectors here so repeated runs embed each text once.
    pub cache_dir: Option<PathBuf>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Hashing,
            dimension: 256,
            endpoint: "https://api.openai.com/v1/embeddings".into(),
            model: "text-embedding-3-small".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    /// Pages shown to the generator per report.
    pub sample_pages: usize,
    /// Upper bound on pairs requested per report.
    pub max_pairs: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            sample_pages: crate::datagen::DEFAULT_SAMPLE_PAGES,
            max_pairs: crate::datagen::DEFAULT_MAX_PAIRS,
        }
    }
}

/// Every knob of a run. Loaded from one JSON document, then overridden by
/// flags, then validated before any work starts. The validated value is
/// written verbatim into each run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub provider: ProviderConfig,
    pub backend: BackendConfig,
    pub pipeline: PipelineKind,
    pub agent: AgentConfig,
    /// k of the single-round RAG baseline.
    pub single_round_k: usize,
    /// k of the fixed-budget RAG baseline; matches the agent's chunk budget
    /// by default.
    pub fixed_budget_k: usize,
    pub bm25: Bm25Params,
    pub embedding: EmbeddingConfig,
    pub paths: PathsConfig,
    /// Questions answered concurrently by `bench`.
    pub workers: usize,
    pub seed: u64,
    /// Regex matching page delimiter lines; group 1 captures the page number.
    pub delimiter: String,
    pub edgar: EdgarConfig,
    pub html: HtmlOptions,
    pub metrics: MetricConstants,
    pub datagen: DatagenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            provider: ProviderConfig::default(),
            backend: BackendConfig::default(),
            pipeline: PipelineKind::Agent,
            agent: AgentConfig::default(),
            single_round_k: 30,
            fixed_budget_k: 75,
            bm25: Bm25Params::default(),
            embedding: EmbeddingConfig::default(),
            paths: PathsConfig::default(),
            workers: 4,
            seed: 0,
            delimiter: DEFAULT_DELIMITER.into(),
            edgar: EdgarConfig::default(),
            html: HtmlOptions::default(),
            metrics: MetricConstants::default(),
            datagen: DatagenConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file. Missing fields take their defaults; unknown
    /// top-level fields are rejected.
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = fs::read_to_string(path)
            .map_err(|e| RunnerError::Config(format!("cannot read {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| RunnerError::Config(format!("{} is not valid JSON: {e}", path.display())))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, RunnerError> {
        serde_json::from_value(value).map_err(|e| RunnerError::Config(e.to_string()))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides on top of `self`.
    ///
    /// Values are read as JSON when they parse (`3`, `true`, `null`,
    /// `{"k":1}`) and as plain strings otherwise. Every key must name an
    /// existing field, so typos fail instead of being ignored.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, RunnerError> {
        let mut value = self.to_value();
        for spec in overrides {
            let spec = spec.as_ref();
            let (key, raw) = spec
                .split_once('=')
                .ok_or_else(|| RunnerError::Config(format!("override {spec:?} is not key=value")))?;
            set_path(&mut value, key.trim(), raw)?;
        }
        let config = Self::from_value(value)?;
        // Nested structs tolerate unknown fields, so check each key landed.
        let landed = config.to_value();
        for spec in overrides {
            let key = spec.as_ref().split_once('=').map(|(k, _)| k.trim()).unwrap_or_default();
            let pointer = format!("/{}", key.replace('.', "/"));
            if landed.pointer(&pointer).is_none() {
                return Err(RunnerError::Config(format!("unknown config field {key:?}")));
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: String| Err(RunnerError::Config(m));
        if let Err(m) = self.provider.validate() {
            return bad(format!("provider: {m}"));
        }
        if let Err(m) = self.agent.validate() {
            return bad(format!("agent: {m}"));
        }
        if self.single_round_k == 0 || self.fixed_budget_k == 0 {
            return bad("baseline k values must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.embedding.dimension == 0 {
            return bad("embedding.dimension must be positive".into());
        }
        if !(self.bm25.k1 >= 0.0 && (0.0..=1.0).contains(&self.bm25.b)) {
            return bad("bm25 needs k1 >= 0 and 0 <= b <= 1".into());
        }
        let m = &self.metrics;
        if ![m.a_tol, m.r_tol, m.epsilon].iter().all(|x| x.is_finite() && *x >= 0.0) {
            return bad("metric constants must be finite and non-negative".into());
        }
        if self.datagen.sample_pages == 0 || self.datagen.max_pairs == 0 {
            return bad("datagen.sample_pages and datagen.max_pairs must be positive".into());
        }
        if self.html.tokens_per_page == 0 {
            return bad("html.tokens_per_page must be positive".into());
        }
        if self.backend.kind == BackendKind::Scripted && self.backend.script.is_none() {
            return bad("the scripted backend needs backend.script".into());
        }
        if let Err(e) = PageDelimiter::new(&self.delimiter) {
            return bad(format!("delimiter: {e}"));
        }
        Ok(())
    }

    pub fn page_delimiter(&self) -> Result<PageDelimiter, RunnerError> {
        PageDelimiter::new(&self.delimiter).map_err(|e| RunnerError::Config(format!("delimiter: {e}")))
    }

    /// The baseline a non-agent pipeline maps to.
    pub fn baseline(&self) -> Option<BaselineKind> {
        match self.pipeline {
            PipelineKind::Agent => None,
            PipelineKind::NoContext => Some(BaselineKind::NoContext),
            PipelineKind::LongContext => Some(BaselineKind::LongContext),
            PipelineKind::SingleRoundRag => Some(BaselineKind::SingleRoundRag { k: self.single_round_k }),
            PipelineKind::FixedBudgetRag => Some(BaselineKind::FixedBudgetRag { k: self.fixed_budget_k }),
        }
    }

    /// Pipeline name as recorded in transcripts.
    pub fn pipeline_name(&self) -> String {
        match self.baseline() {
            Some(b) => b.name(),
            None => "agent".into(),
        }
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), RunnerError> {
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(RunnerError::Config(format!("bad override key {key:?}")));
    }
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| RunnerError::Config(format!("{key:?}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    unreachable!("loop returns on the last key part")
}
