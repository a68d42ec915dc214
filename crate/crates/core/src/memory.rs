//! Agent memory and retrieval-augmented generation.
//!
//! Documents are embedded with a hashed bag of words: casefold, split on
//! whitespace, bucket each token by `fnv1a64(token) % 64`, count, then
//! L2-normalise. The bucket hash is part of the corpus format; changing it
//! changes every stored embedding.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::text::fnv1a64;

pub const EMBEDDING_DIM: usize = 64;

/// Similarities are compared at this resolution when ranking, so values
/// that are mathematically equal rank by `doc_id`.
const RANK_RESOLUTION: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("document {0} already indexed")]
    DuplicateDoc(String),
    #[error("document {0} has empty text")]
    EmptyDocument(String),
    #[error("corpus line {line}: {message}")]
    Corpus { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    /// Assigned on indexing.
    #[serde(default)]
    pub seq: u64,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            text: text.into(),
            tags: BTreeSet::new(),
            seq: 0,
        }
    }

    pub fn with_tags<I, S>(mut self, tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tags = tags.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn cosine(&self, other: &Embedding) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        let na: f64 = self.0.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = other.0.iter().map(|b| b * b).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

pub fn bucket(token: &str) -> usize {
    (fnv1a64(token.as_bytes()) % EMBEDDING_DIM as u64) as usize
}

pub fn embed(text: &str) -> Embedding {
    let mut v = vec![0.0f64; EMBEDDING_DIM];
    for token in text.split_whitespace() {
        v[bucket(&token.to_lowercase())] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Embedding(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub doc_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KnowledgeBase {
    entries: BTreeMap<String, (Document, Embedding)>,
    next_seq: u64,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn index(&mut self, mut doc: Document) -> Result<String, MemoryError> {
        if self.entries.contains_key(&doc.doc_id) {
            return Err(MemoryError::DuplicateDoc(doc.doc_id));
        }
        if doc.text.trim().is_empty() {
            return Err(MemoryError::EmptyDocument(doc.doc_id));
        }
        self.next_seq += 1;
        doc.seq = self.next_seq;
        let id = doc.doc_id.clone();
        let emb = embed(&doc.text);
        self.entries.insert(id.clone(), (doc, emb));
        Ok(id)
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.entries.get(doc_id).map(|(d, _)| d)
    }

    pub fn embedding(&self, doc_id: &str) -> Option<&Embedding> {
        self.entries.get(doc_id).map(|(_, e)| e)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.entries.values().map(|(d, _)| d)
    }

    /// Top-`k` documents by cosine similarity to `query`, restricted to
    /// documents carrying every tag in `tag_filter`. Ties rank by `doc_id`.
    pub fn retrieve(&self, query: &str, k: usize, tag_filter: Option<&BTreeSet<String>>) -> Vec<Retrieved> {
        if k == 0 {
            return Vec::new();
        }
        let q = embed(query);
        let mut scored: Vec<(i64, Retrieved)> = self
            .entries
            .values()
            .filter(|(d, _)| tag_filter.is_none_or(|f| f.is_subset(&d.tags)))
            .map(|(d, e)| {
                let similarity = q.cosine(e);
                let key = (similarity / RANK_RESOLUTION).round() as i64;
                (
                    key,
                    Retrieved {
                        doc_id: d.doc_id.clone(),
                        similarity,
                    },
                )
            })
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.doc_id.cmp(&b.1.doc_id)));
        scored.into_iter().take(k).map(|(_, r)| r).collect()
    }

    /// Digest over the full contents; used to show retrieval never mutates.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("knowledge base serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Checks every stored embedding against a fresh `embed` of its text.
    pub fn embeddings_consistent(&self) -> bool {
        self.entries.values().all(|(d, e)| *e == embed(&d.text))
    }

    /// Loads JSON-lines `{doc_id, text, tags}` records.
    pub fn load_jsonl(path: &Path) -> Result<Self, MemoryError> {
        let source = std::fs::read_to_string(path).map_err(|e| MemoryError::Io(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&source)
    }

    pub fn from_jsonl(source: &str) -> Result<Self, MemoryError> {
        let mut kb = Self::new();
        for (idx, line) in source.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(line).map_err(|e| MemoryError::Corpus {
                line: idx + 1,
                message: e.to_string(),
            })?;
            kb.index(doc)?;
        }
        Ok(kb)
    }
}

/// Drops candidates below `threshold`, keeping order.
pub fn rerank_filter(candidates: Vec<Retrieved>, threshold: f64) -> Vec<Retrieved> {
    candidates
        .into_iter()
        .filter(|c| c.similarity >= threshold)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_properties() {
        assert_eq!(embed("alpha beta"), embed("alpha beta"));
        assert_eq!(embed("a a b"), embed("b a a"));
        assert_eq!(embed("Alpha"), embed("alpha"));
        let e = embed("alpha beta");
        assert!((e.cosine(&e) - 1.0).abs() < 1e-9);
        assert!((e.norm() - 1.0).abs() < 1e-12);
        assert!(embed("   ").0.iter().all(|x| *x == 0.0));
    }

    fn corpus() -> KnowledgeBase {
        let mut kb = KnowledgeBase::new();
        kb.index(Document::new("d1", "alpha beta")).unwrap();
        kb.index(Document::new("d2", "beta gamma")).unwrap();
        kb.index(Document::new("d3", "delta")).unwrap();
        kb
    }

    #[test]
    fn small_corpus_ranking() {
        let kb = corpus();
        let hits = kb.retrieve("beta", 2, None);
        // both score 1/sqrt(2); the tie ranks by id
        assert_eq!(hits.iter().map(|h| h.doc_id.as_str()).collect::<Vec<_>>(), ["d1", "d2"]);
        assert!((hits[0].similarity - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(kb.retrieve("beta", 0, None).is_empty());
        let hits = kb.retrieve("beta gamma", 3, None);
        assert_eq!(hits[0].doc_id, "d2");
        assert!((hits[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn index_errors_and_lookup() {
        let mut kb = corpus();
        assert_eq!(kb.get("d1").unwrap().text, "alpha beta");
        assert_eq!(
            kb.index(Document::new("d1", "again")),
            Err(MemoryError::DuplicateDoc("d1".into()))
        );
        for i in 0..97 {
            kb.index(Document::new(format!("x{i}"), format!("word{i}"))).unwrap();
        }
        assert_eq!(kb.len(), 100);
        assert!(kb.embeddings_consistent());
    }

    #[test]
    fn tag_filter() {
        let mut kb = KnowledgeBase::new();
        kb.index(Document::new("a", "beta").with_tags(["faq"])).unwrap();
        kb.index(Document::new("b", "beta").with_tags(["faq", "ops"])).unwrap();
        let f: BTreeSet<String> = ["ops".to_string()].into();
        let hits = kb.retrieve("beta", 5, Some(&f));
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].doc_id, "b");
    }

    #[test]
    fn rerank() {
        let c = vec![
            Retrieved { doc_id: "d1".into(), similarity: 0.9 },
            Retrieved { doc_id: "d2".into(), similarity: 0.2 },
        ];
        assert_eq!(rerank_filter(c.clone(), 0.5), vec![c[0].clone()]);
        assert_eq!(rerank_filter(c.clone(), 0.0), c);
        assert!(rerank_filter(c, 1.01).is_empty());
    }

    #[test]
    fn retrieval_does_not_mutate() {
        let kb = corpus();
        let before = kb.digest();
        let _ = kb.retrieve("alpha", 3, None);
        assert_eq!(kb.digest(), before);
    }
}
