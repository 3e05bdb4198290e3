use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{hit_order, tokenize, RetrievalError, RetrievalUnit, Retriever, ScoredHit};
use crate::http::{HttpRequest, HttpTransport};

/// Turns texts into fixed-dimension vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError>;
}

fn normalize(mut v: Vec<f64>, expected: usize) -> Result<Vec<f64>, RetrievalError> {
    if v.len() != expected {
        return Err(RetrievalError::DimensionMismatch {
            expected,
            actual: v.len(),
        });
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(RetrievalError::Provider("embedding has zero or non-finite norm".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Unit-normalized vectors for every unit of one report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseIndex {
    pub model: String,
    pub dimension: usize,
    pub units: Vec<RetrievalUnit>,
    pub vectors: Vec<Vec<f64>>,
}

pub fn embed_units(
    provider: &dyn EmbeddingProvider,
    units: Vec<RetrievalUnit>,
) -> Result<DenseIndex, RetrievalError> {
    if units.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let dimension = provider.dimension();
    let texts: Vec<String> = units.iter().map(|u| u.text.clone()).collect();
    let raw = provider.embed(&texts)?;
    if raw.len() != texts.len() {
        return Err(RetrievalError::Provider(format!(
            "asked for {} embeddings, got {}",
            texts.len(),
            raw.len()
        )));
    }
    let vectors = raw
        .into_iter()
        .map(|v| normalize(v, dimension))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DenseIndex {
        model: provider.model_id().to_string(),
        dimension,
        units,
        vectors,
    })
}

/// Inner-product search; returns `min(k, n_units)` hits.
pub fn dense_search(
    index: &DenseIndex,
    provider: &dyn EmbeddingProvider,
    query: &str,
    k: usize,
) -> Result<Vec<ScoredHit>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if query.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    let q = provider
        .embed(&[query.to_string()])?
        .pop()
        .ok_or_else(|| RetrievalError::Provider("empty embedding response".into()))?;
    let q = normalize(q, index.dimension)?;
    let mut hits: Vec<ScoredHit> = index
        .units
        .iter()
        .zip(&index.vectors)
        .map(|(u, v)| ScoredHit {
            unit_id: u.unit_id.clone(),
            page_number: u.page_number,
            score: v.iter().zip(&q).map(|(a, b)| a * b).sum(),
        })
        .collect();
    hits.sort_by(hit_order);
    hits.truncate(k);
    Ok(hits)
}

/// A dense index bundled with the provider that embeds queries.
pub struct DenseRetriever {
    pub index: DenseIndex,
    pub provider: Arc<dyn EmbeddingProvider>,
}

impl Retriever for DenseRetriever {
    fn search(&self, query: &str, k: usize) -> Result<Vec<ScoredHit>, RetrievalError> {
        dense_search(&self.index, self.provider.as_ref(), query, k)
    }

    fn units(&self) -> &[RetrievalUnit] {
        &self.index.units
    }
}

/// Deterministic offline embedder: feature-hashes analyzer terms into `dim`
/// buckets with a hash-derived sign.
pub struct HashingEmbedder {
    dim: usize,
    model: String,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            model: format!("hashing-{dim}"),
        }
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0; self.dim];
                for term in tokenize(t) {
                    let h = Sha256::digest(term.as_bytes());
                    let bucket = u64::from_le_bytes(h[..8].try_into().unwrap()) as usize % self.dim;
                    let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
                    v[bucket] += sign;
                }
                // keep empty texts embeddable
                if v.iter().all(|x| *x == 0.0) {
                    v[0] = 1e-6;
                }
                v
            })
            .collect())
    }
}

/// OpenAI-compatible `/embeddings` endpoint.
pub struct HttpEmbedder {
    pub endpoint: String,
    pub model: String,
    pub dimension: usize,
    pub api_key: Option<String>,
    pub transport: Arc<dyn HttpTransport>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

impl EmbeddingProvider for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let mut req = HttpRequest::post_json(self.endpoint.clone(), &body);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let resp = self
            .transport
            .execute(&req)
            .map_err(|e| RetrievalError::Provider(e.to_string()))?;
        if !resp.is_success() {
            return Err(RetrievalError::Provider(format!("HTTP {}: {}", resp.status, resp.text())));
        }
        let mut parsed: EmbeddingResponse =
            serde_json::from_slice(&resp.body).map_err(|e| RetrievalError::Provider(format!("decode: {e}")))?;
        parsed.data.sort_by_key(|d| d.index);
        let out: Vec<Vec<f64>> = parsed.data.into_iter().map(|d| d.embedding).collect();
        for v in &out {
            if v.len() != self.dimension {
                return Err(RetrievalError::DimensionMismatch {
                    expected: self.dimension,
                    actual: v.len(),
                });
            }
        }
        Ok(out)
    }
}

/// Wraps a provider with a cache keyed by `(model, sha256(text))`.
///
/// With a directory configured, each vector is also persisted as
/// `{dir}/{key}.json`, so a later session can search offline for every text
/// it has already seen.
pub struct CachedEmbedder {
    inner: Arc<dyn EmbeddingProvider>,
    dir: Option<PathBuf>,
    memory: Mutex<BTreeMap<String, Vec<f64>>>,
    write_lock: Mutex<()>,
}

impl CachedEmbedder {
    pub fn new(inner: Arc<dyn EmbeddingProvider>, dir: Option<PathBuf>) -> Self {
        Self {
            inner,
            dir,
            memory: Mutex::new(BTreeMap::new()),
            write_lock: Mutex::new(()),
        }
    }

    pub fn cache_key(model: &str, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(model.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    fn lookup(&self, key: &str) -> Option<Vec<f64>> {
        if let Some(v) = self.memory.lock().unwrap().get(key) {
            return Some(v.clone());
        }
        let path = self.dir.as_ref()?.join(format!("{key}.json"));
        let v: Vec<f64> = serde_json::from_str(&fs::read_to_string(path).ok()?).ok()?;
        self.memory.lock().unwrap().insert(key.to_string(), v.clone());
        Some(v)
    }

    fn store(&self, key: &str, v: &[f64]) {
        self.memory.lock().unwrap().insert(key.to_string(), v.to_vec());
        if let Some(dir) = &self.dir {
            let _guard = self.write_lock.lock().unwrap();
            let tmp = dir.join(format!("{key}.json.tmp"));
            let dest = dir.join(format!("{key}.json"));
            let ok = fs::create_dir_all(dir).is_ok()
                && fs::write(&tmp, serde_json::to_vec(v).unwrap()).is_ok()
                && fs::rename(&tmp, &dest).is_ok();
            if !ok {
                log::warn!("could not persist embedding {key} to {}", dir.display());
            }
        }
    }
}

impl EmbeddingProvider for CachedEmbedder {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let model = self.inner.model_id().to_string();
        let keys: Vec<String> = texts.iter().map(|t| Self::cache_key(&model, t)).collect();
        let mut out: Vec<Option<Vec<f64>>> = keys.iter().map(|k| self.lookup(k)).collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.inner.embed(&batch)?;
            if fresh.len() != batch.len() {
                return Err(RetrievalError::Provider("provider returned wrong batch size".into()));
            }
            for (&i, v) in missing.iter().zip(fresh) {
                self.store(&keys[i], &v);
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled above")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Unit `i` (text "u{i}") embeds to basis vector e_i.
    struct Basis(usize);

    impl EmbeddingProvider for Basis {
        fn model_id(&self) -> &str {
            "basis"
        }
        fn dimension(&self) -> usize {
            self.0
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
            texts
                .iter()
                .map(|t| {
                    let i: usize = t.trim_start_matches('u').parse().map_err(|_| RetrievalError::Provider(t.clone()))?;
                    let mut v = vec![0.0; self.0];
                    v[i] = 1.0;
                    Ok(v)
                })
                .collect()
        }
    }

    fn units(n: usize) -> Vec<RetrievalUnit> {
        (0..n)
            .map(|i| RetrievalUnit {
                unit_id: format!("p{}", i + 1),
                page_number: i as u32 + 1,
                text: format!("u{i}"),
                token_count: 1,
            })
            .collect()
    }

    #[test]
    fn basis_vectors() {
        let p = Basis(4);
        let idx = embed_units(&p, units(4)).unwrap();
        let hits = dense_search(&idx, &p, "u2", 4).unwrap();
        assert_eq!(hits[0].page_number, 3);
        assert!((hits[0].score - 1.0).abs() < 1e-12);
        assert_eq!(hits.len(), 4);
        for v in &idx.vectors {
            assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_vectors_use_tie_break() {
        struct Same;
        impl EmbeddingProvider for Same {
            fn model_id(&self) -> &str {
                "same"
            }
            fn dimension(&self) -> usize {
                2
            }
            fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
                Ok(texts.iter().map(|_| vec![1.0, 1.0]).collect())
            }
        }
        let mut us = units(3);
        us.reverse();
        let idx = embed_units(&Same, us).unwrap();
        let pages: Vec<_> = dense_search(&idx, &Same, "q", 3).unwrap().iter().map(|h| h.page_number).collect();
        assert_eq!(pages, [1, 2, 3]);
    }

    #[test]
    fn dimension_mismatch() {
        struct Wrong;
        impl EmbeddingProvider for Wrong {
            fn model_id(&self) -> &str {
                "w"
            }
            fn dimension(&self) -> usize {
                3
            }
            fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
                Ok(texts.iter().map(|_| vec![1.0]).collect())
            }
        }
        assert!(matches!(
            embed_units(&Wrong, units(1)),
            Err(RetrievalError::DimensionMismatch { expected: 3, actual: 1 })
        ));
    }

    #[test]
    fn cache_replays_offline() {
        struct Flaky {
            online: std::sync::atomic::AtomicBool,
            inner: Basis,
        }
        impl EmbeddingProvider for Flaky {
            fn model_id(&self) -> &str {
                "basis"
            }
            fn dimension(&self) -> usize {
                4
            }
            fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
                if self.online.load(std::sync::atomic::Ordering::SeqCst) {
                    self.inner.embed(texts)
                } else {
                    Err(RetrievalError::Provider("offline".into()))
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let flaky = Arc::new(Flaky {
            online: true.into(),
            inner: Basis(4),
        });
        let cached = CachedEmbedder::new(flaky.clone(), Some(dir.path().to_path_buf()));
        let idx = embed_units(&cached, units(4)).unwrap();
        dense_search(&idx, &cached, "u1", 2).unwrap();
        flaky.online.store(false, std::sync::atomic::Ordering::SeqCst);

        // A fresh cache over the same directory has nothing in memory.
        let reopened = CachedEmbedder::new(flaky, Some(dir.path().to_path_buf()));
        let hits = dense_search(&idx, &reopened, "u1", 2).unwrap();
        assert_eq!(hits[0].page_number, 2);
        assert!(dense_search(&idx, &reopened, "u3", 2).is_ok());
        assert!(matches!(
            dense_search(&idx, &reopened, "never seen", 2),
            Err(RetrievalError::Provider(_))
        ));
    }

    #[test]
    fn hashing_embedder_is_deterministic() {
        let e = HashingEmbedder::new(64);
        let a = e.embed(&["net sales 2023".into()]).unwrap();
        let b = e.embed(&["net sales 2023".into()]).unwrap();
        assert_eq!(a, b);
        let idx = embed_units(&e, units(3)).unwrap();
        assert_eq!(dense_search(&idx, &e, "u1", 1).unwrap()[0].page_number, 2);
    }
}
