use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{hit_order, tokenize, RetrievalError, RetrievalUnit, Retriever, ScoredHit};

const FORMAT: &str = "findoc-sparse-index";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparseScheme {
    /// `sum over query terms of tf * ln(N / df)`, no length normalization.
    Tfidf,
    /// Okapi BM25 with `idf = ln(1 + (N - df + 0.5) / (df + 0.5))`.
    Bm25,
}

impl std::str::FromStr for SparseScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tfidf" | "tf-idf" => Ok(Self::Tfidf),
            "bm25" => Ok(Self::Bm25),
            other => Err(format!("unknown sparse scheme {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Inverted index over the units of one report.
///
/// Postings reference units by position in `units`. Unit lengths count
/// analyzer terms (see [`tokenize`]), which is also what BM25 normalizes by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseIndex {
    format: String,
    version: u32,
    pub scheme: SparseScheme,
    pub bm25_params: Bm25Params,
    pub n_units: usize,
    pub vocabulary: BTreeMap<String, u32>,
    pub postings: BTreeMap<String, Vec<(u32, u32)>>,
    pub unit_lengths: Vec<u32>,
    pub units: Vec<RetrievalUnit>,
}

pub fn build_sparse_index(
    units: Vec<RetrievalUnit>,
    scheme: SparseScheme,
    bm25_params: Bm25Params,
) -> Result<SparseIndex, RetrievalError> {
    if units.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    let mut unit_lengths = Vec::with_capacity(units.len());
    for (idx, unit) in units.iter().enumerate() {
        let terms = tokenize(&unit.text);
        unit_lengths.push(terms.len() as u32);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in terms {
            *tf.entry(t).or_default() += 1;
        }
        for (term, count) in tf {
            postings.entry(term).or_default().push((idx as u32, count));
        }
    }
    let vocabulary = postings.iter().map(|(t, p)| (t.clone(), p.len() as u32)).collect();
    Ok(SparseIndex {
        format: FORMAT.into(),
        version: VERSION,
        scheme,
        bm25_params,
        n_units: units.len(),
        vocabulary,
        postings,
        unit_lengths,
        units,
    })
}

impl SparseIndex {
    pub fn avg_unit_length(&self) -> f64 {
        self.unit_lengths.iter().map(|&l| l as f64).sum::<f64>() / self.n_units as f64
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = match self.vocabulary.get(term) {
            Some(&df) => df as f64,
            None => return 0.0,
        };
        let n = self.n_units as f64;
        match self.scheme {
            SparseScheme::Tfidf => (n / df).ln(),
            SparseScheme::Bm25 => (1.0 + (n - df + 0.5) / (df + 0.5)).ln(),
        }
    }

    /// Scores of every unit, in unit order. Query terms count once each and
    /// contribute in lexicographic order.
    pub fn score_all(&self, query: &str) -> Result<Vec<f64>, RetrievalError> {
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        if terms.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let mut scores = vec![0.0; self.n_units];
        let avgdl = self.avg_unit_length();
        let Bm25Params { k1, b } = self.bm25_params;
        for term in &terms {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for &(idx, tf) in postings {
                let tf = tf as f64;
                let contribution = match self.scheme {
                    SparseScheme::Tfidf => tf * idf,
                    SparseScheme::Bm25 => {
                        let len = self.unit_lengths[idx as usize] as f64;
                        let norm = if avgdl > 0.0 { len / avgdl } else { 0.0 };
                        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm))
                    }
                };
                scores[idx as usize] += contribution;
            }
        }
        Ok(scores)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("index serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RetrievalError> {
        let index: SparseIndex =
            serde_json::from_str(text).map_err(|e| RetrievalError::IndexFormat(e.to_string()))?;
        if index.format != FORMAT || index.version != VERSION {
            return Err(RetrievalError::IndexFormat(format!(
                "expected {FORMAT} v{VERSION}, found {} v{}",
                index.format, index.version
            )));
        }
        Ok(index)
    }
}

impl Retriever for SparseIndex {
    /// Only units with a positive score are returned.
    fn search(&self, query: &str, k: usize) -> Result<Vec<ScoredHit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let scores = self.score_all(query)?;
        let mut hits: Vec<ScoredHit> = scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0.0)
            .map(|(i, &score)| ScoredHit {
                unit_id: self.units[i].unit_id.clone(),
                page_number: self.units[i].page_number,
                score,
            })
            .collect();
        hits.sort_by(hit_order);
        hits.truncate(k);
        Ok(hits)
    }

    fn units(&self) -> &[RetrievalUnit] {
        &self.units
    }
}
