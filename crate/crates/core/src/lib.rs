//! # findoc
//!
//! Numerical question answering over long financial reports.
//!
//! The crate is organised around the life cycle of a question:
//!
//! - [`corpus`] parses page-delimited Markdown reports and reads/writes the
//!   QA dataset (JSON lines).
//! - [`retrieval`] builds per-report sparse (TF-IDF, BM25) and dense indices,
//!   serves top-k search and computes page-level Recall@k.
//! - [`llm`] is a provider-agnostic chat client with a scripted backend and a
//!   content-addressed response cache.
//! - [`pipelines`] holds the multi-round expansion/solving/evaluation agent
//!   and the no-context, long-context and single-round RAG baselines.
//! - [`metrics`] implements answer normalization, exact match, tolerance
//!   accuracy, token F1 and difficulty-stratified aggregation.
//! - [`datagen`] generates QA candidates and filters them with a restricted
//!   arithmetic interpreter as the execution oracle.
//! - [`ingest`] lists and downloads filings from SEC EDGAR and converts HTML
//!   filings into page-delimited reports.
//! - [`runner`] ties the pieces together for batch runs (manifests, scores).
//!
//! All network access goes through [`http::HttpTransport`], so every
//! networked component can be replayed from recorded fixtures.
//!
//! ```
//! use findoc::metrics::{tolerance_correct, MetricConstants};
//!
//! let c = MetricConstants::default();
//! assert!(tolerance_correct(518.80, 518.75, &c));
//! assert!(!tolerance_correct(0.584, 0.82, &c));
//! ```

pub mod corpus;
pub mod datagen;
pub mod http;
pub mod ingest;
pub mod llm;
pub mod metrics;
pub mod pipelines;
pub mod retrieval;
pub mod runner;

// The guide under `book/` is compiled as doc-tests so its snippets cannot rot.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/documents.md")]
    pub struct Documents;
    #[doc = include_str!("../../../book/src/retrieval.md")]
    pub struct Retrieval;
    #[doc = include_str!("../../../book/src/agent.md")]
    pub struct Agent;
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub struct Metrics;
    #[doc = include_str!("../../../book/src/datagen.md")]
    pub struct Datagen;
    #[doc = include_str!("../../../book/src/ingest.md")]
    pub struct Ingest;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
