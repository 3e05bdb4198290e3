//! Batch plumbing: validated run configuration, on-disk indices, benchmark
//! runs with manifests, scoring, dataset generation and ingestion.
//!
//! A bench run writes one directory per run:
//!
//! ```text
//! {paths.output}/{run_id}/
//!   manifest.json        config, model ids, input hashes, cache state
//!   transcripts/{id}.json
//!   predictions.jsonl
//!   scores.jsonl
//!   eval_report.json
//! ```
//!
//! [`rerun`] re-executes a run from its manifest after checking that the
//! dataset, corpus and backend script still hash to the recorded values.

use std::path::PathBuf;

use thiserror::Error;

mod bench;
mod config;
mod indices;
mod tasks;

pub use bench::{
    answer_question, ask, bench, build_indices, build_llm, read_predictions, rerun, score_predictions,
    transcript_file_name, write_scores, AskOutcome, BenchOptions, BenchOutcome, CacheState, InputHashes, Manifest,
    ModelIds, Prediction, MANIFEST_FORMAT,
};
pub use config::{
    BackendConfig, BackendKind, DatagenConfig, EmbeddingConfig, EmbeddingKind, PathsConfig, PipelineKind, RunConfig,
};
pub use indices::{build_retriever, embedder, index_path, load_retriever, write_index};
pub use tasks::{run_ablation, run_datagen, run_ingest, run_stats, DatagenOutcome, IngestOutcome, IngestRequest};

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunnerError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RunnerError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration, 3 for data and files, 4 for providers.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) => 2,
            RunnerError::Data(_) | RunnerError::Io { .. } => 3,
            RunnerError::Provider(_) => 4,
        }
    }
}

impl From<crate::corpus::CorpusError> for RunnerError {
    fn from(e: crate::corpus::CorpusError) -> Self {
        RunnerError::Data(e.to_string())
    }
}
