use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{build_sparse_index, rechunk, Bm25Params, Granularity, RetrievalError, Retriever, SparseScheme};
use crate::corpus::{CorpusError, QAInstance, Report};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub granularity: Granularity,
    pub n_units: usize,
    /// `(k, macro-averaged Recall@k)` in the order the k values were given.
    pub recall: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub scheme: SparseScheme,
    /// How per-question recalls are combined.
    pub averaging: String,
    pub n_questions: usize,
    pub rows: Vec<AblationRow>,
}

/// Page-level Recall@k of sparse retrieval under several chunk granularities.
///
/// The question text is the query. Hits are mapped to their pages before
/// Recall@k, so every row is scored against the same page-level gold sets.
/// A page-granularity row is always included first.
pub fn ablate_chunks(
    reports: &[Report],
    instances: &[QAInstance],
    sizes: &[usize],
    k_values: &[usize],
    scheme: SparseScheme,
) -> Result<AblationTable, RetrievalError> {
    let by_id: BTreeMap<&str, &Report> = reports.iter().map(|r| (r.report_id.as_str(), r)).collect();
    for inst in instances {
        if !by_id.contains_key(inst.report_id.as_str()) {
            return Err(CorpusError::DanglingReference {
                instance: inst.id.clone(),
                report_id: inst.report_id.clone(),
            }
            .into());
        }
    }
    let mut granularities = vec![Granularity::Page];
    granularities.extend(sizes.iter().map(|&s| Granularity::Tokens(s)));

    let mut rows = Vec::new();
    for g in granularities {
        let mut sums = vec![0.0; k_values.len()];
        let mut n_units = 0;
        let mut n_questions = 0;
        for (report_id, report) in &by_id {
            let questions: Vec<&QAInstance> = instances.iter().filter(|i| i.report_id == *report_id).collect();
            let units = rechunk(report, g);
            if units.is_empty() {
                continue;
            }
            n_units += units.len();
            if questions.is_empty() {
                continue;
            }
            let total = units.len();
            let index = build_sparse_index(units, scheme, Bm25Params::default())?;
            for q in questions {
                let pages: Vec<u32> = match index.search(&q.question, total) {
                    Ok(hits) => hits.iter().map(|h| h.page_number).collect(),
                    Err(RetrievalError::EmptyQuery) => Vec::new(),
                    Err(e) => return Err(e),
                };
                for (slot, &k) in sums.iter_mut().zip(k_values) {
                    *slot += super::recall_at_k(&pages, &q.evidence_pages, k)?;
                }
                n_questions += 1;
            }
        }
        let denom = n_questions.max(1) as f64;
        rows.push(AblationRow {
            granularity: g,
            n_units,
            recall: k_values.iter().zip(&sums).map(|(&k, &s)| (k, s / denom)).collect(),
        });
    }
    Ok(AblationTable {
        scheme,
        averaging: "macro".into(),
        n_questions: instances.len(),
        rows,
    })
}
