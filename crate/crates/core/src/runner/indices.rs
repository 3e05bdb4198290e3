use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{EmbeddingKind, RunConfig, RunnerError};
use crate::corpus::Report;
use crate::http::UreqTransport;
use crate::pipelines::IndexKind;
use crate::retrieval::{
    build_sparse_index, embed_units, rechunk, CachedEmbedder, DenseIndex, DenseRetriever, EmbeddingProvider,
    HashingEmbedder, HttpEmbedder, Retriever, SparseIndex, SparseScheme,
};

fn kind_name(kind: IndexKind) -> &'static str {
    match kind {
        IndexKind::Bm25 => "bm25",
        IndexKind::Tfidf => "tfidf",
        IndexKind::Dense => "dense",
    }
}

/// `{index_dir}/{report_id}.{kind}.{granularity}.json`
pub fn index_path(config: &RunConfig, report_id: &str) -> PathBuf {
    config.paths.index_dir.join(format!(
        "{report_id}.{}.{}.json",
        kind_name(config.agent.index),
        config.agent.granularity
    ))
}

/// The query embedder for dense retrieval, wrapped in the vector cache.
pub fn embedder(config: &RunConfig) -> Result<Arc<dyn EmbeddingProvider>, RunnerError> {
    let e = &config.embedding;
    let inner: Arc<dyn EmbeddingProvider> = match e.kind {
        EmbeddingKind::Hashing => Arc::new(HashingEmbedder::new(e.dimension)),
        EmbeddingKind::Http => Arc::new(HttpEmbedder {
            endpoint: e.endpoint.clone(),
            model: e.model.clone(),
            dimension: e.dimension,
            api_key: std::env::var(&e.api_key_env).ok(),
            transport: Arc::new(UreqTransport::new()),
        }),
    };
    Ok(Arc::new(CachedEmbedder::new(inner, e.cache_dir.clone())))
}

fn scheme(kind: IndexKind) -> Option<SparseScheme> {
    match kind {
        IndexKind::Bm25 => Some(SparseScheme::Bm25),
        IndexKind::Tfidf => Some(SparseScheme::Tfidf),
        IndexKind::Dense => None,
    }
}

enum Built {
    Sparse(SparseIndex),
    Dense(DenseIndex, Arc<dyn EmbeddingProvider>),
}

fn build(report: &Report, config: &RunConfig) -> Result<Built, RunnerError> {
    let units = rechunk(report, config.agent.granularity);
    let data = |e: crate::retrieval::RetrievalError| RunnerError::Data(format!("{}: {e}", report.report_id));
    match scheme(config.agent.index) {
        Some(s) => Ok(Built::Sparse(build_sparse_index(units, s, config.bm25).map_err(data)?)),
        None => {
            let provider = embedder(config)?;
            let index = embed_units(provider.as_ref(), units)
                .map_err(|e| RunnerError::Provider(format!("{}: {e}", report.report_id)))?;
            Ok(Built::Dense(index, provider))
        }
    }
}

/// Builds the configured index for one report in memory.
pub fn build_retriever(report: &Report, config: &RunConfig) -> Result<Box<dyn Retriever>, RunnerError> {
    Ok(match build(report, config)? {
        Built::Sparse(idx) => Box::new(idx),
        Built::Dense(index, provider) => Box::new(DenseRetriever { index, provider }),
    })
}

/// Builds and saves the configured index for one report.
pub fn write_index(report: &Report, config: &RunConfig) -> Result<PathBuf, RunnerError> {
    let path = index_path(config, &report.report_id);
    let json = match build(report, config)? {
        Built::Sparse(idx) => idx.to_json(),
        Built::Dense(index, _) => serde_json::to_string(&index).expect("dense index serializes"),
    };
    let dir = &config.paths.index_dir;
    fs::create_dir_all(dir).map_err(|e| RunnerError::io(dir, e))?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, json).map_err(|e| RunnerError::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| RunnerError::io(&path, e))?;
    Ok(path)
}

/// Loads the saved index for `report_id`. A missing file is a data error
/// that names the command to run.
pub fn load_retriever(report_id: &str, config: &RunConfig) -> Result<Box<dyn Retriever>, RunnerError> {
    let path = index_path(config, report_id);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(RunnerError::Data(format!(
                "no {} index for report {report_id:?} at {}; build it with `findoc index`",
                kind_name(config.agent.index),
                path.display()
            )))
        }
        Err(e) => return Err(RunnerError::io(&path, e)),
    };
    let corrupt = |m: String| RunnerError::Data(format!("{}: {m}; rebuild it with `findoc index`", path.display()));
    match scheme(config.agent.index) {
        Some(s) => {
            let idx = SparseIndex::from_json(&text).map_err(|e| corrupt(e.to_string()))?;
            if idx.scheme != s {
                return Err(corrupt(format!("holds a {:?} index", idx.scheme)));
            }
            if idx.bm25_params != config.bm25 {
                return Err(corrupt("was built with different bm25 parameters".into()));
            }
            Ok(Box::new(idx))
        }
        None => {
            let index: DenseIndex = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
            let provider = embedder(config)?;
            if index.model != provider.model_id() || index.dimension != provider.dimension() {
                return Err(corrupt(format!(
                    "was embedded with {} ({} dims), config uses {} ({} dims)",
                    index.model,
                    index.dimension,
                    provider.model_id(),
                    provider.dimension()
                )));
            }
            Ok(Box::new(DenseRetriever { index, provider }))
        }
    }
}

pub(crate) fn index_exists(config: &RunConfig, report_id: &str) -> bool {
    Path::new(&index_path(config, report_id)).is_file()
}
