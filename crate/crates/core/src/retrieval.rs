//! Per-report retrieval: chunking, sparse and dense indices, Recall@k and the
//! chunk-granularity ablation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod ablation;
mod chunking;
mod dense;
mod recall;
mod sparse;

pub use ablation::{ablate_chunks, AblationRow, AblationTable};
pub use chunking::{rechunk, Granularity, ABLATION_SIZES};
pub use dense::{
    dense_search, embed_units, CachedEmbedder, DenseIndex, DenseRetriever, EmbeddingProvider, HashingEmbedder, HttpEmbedder,
};
pub use recall::{mean_recall_at_k, recall_at_k};
pub use sparse::{build_sparse_index, Bm25Params, SparseIndex, SparseScheme};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index over zero units")]
    EmptyCorpus,
    #[error("query has no searchable terms")]
    EmptyQuery,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("gold page set is empty")]
    EmptyGold,
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding provider error: {0}")]
    Provider(String),
    #[error("index file error: {0}")]
    IndexFormat(String),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

/// A searchable unit: a whole page or a piece of one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalUnit {
    pub unit_id: String,
    pub page_number: u32,
    pub text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub unit_id: String,
    pub page_number: u32,
    pub score: f64,
}

/// Score descending, then page ascending, then unit id ascending.
pub fn hit_order(a: &ScoredHit, b: &ScoredHit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.page_number.cmp(&b.page_number))
        .then_with(|| a.unit_id.cmp(&b.unit_id))
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Anything that ranks units of one report for a text query.
pub trait Retriever: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<Vec<ScoredHit>, RetrievalError>;
    fn units(&self) -> &[RetrievalUnit];

    fn unit(&self, unit_id: &str) -> Option<&RetrievalUnit> {
        self.units().iter().find(|u| u.unit_id == unit_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Net Sales, 2023"), vec!["net", "sales", "2023"]);
        assert!(tokenize("").is_empty());
        assert_eq!(
            tokenize("EBITDA/(Interest+Principal)"),
            vec!["ebitda", "interest", "principal"]
        );
    }

    #[test]
    fn tie_break() {
        let mut hits = vec![
            ScoredHit { unit_id: "b".into(), page_number: 2, score: 1.0 },
            ScoredHit { unit_id: "a".into(), page_number: 2, score: 1.0 },
            ScoredHit { unit_id: "z".into(), page_number: 1, score: 1.0 },
            ScoredHit { unit_id: "y".into(), page_number: 9, score: 2.0 },
        ];
        hits.sort_by(hit_order);
        let ids: Vec<_> = hits.iter().map(|h| h.unit_id.as_str()).collect();
        assert_eq!(ids, ["y", "z", "a", "b"]);
    }
}
