//! Okapi BM25 sparse retrieval over a [`Corpus`].
//!
//! Scoring uses the Lucene-style smoothed idf so that every matching term
//! contributes a positive weight:
//!
//! ```text
//! idf(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))
//! score(q, d) = Σ_{t ∈ q} idf(t) · tf·(k1 + 1) / (tf + k1·(1 − b + b·|d|/avgdl))
//! ```
//!
//! Query terms are summed per occurrence, so a repeated query term counts twice.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const DEFAULT_TOP_N: usize = 100;

const INDEX_FORMAT: &str = "cqr-bm25-index";
const INDEX_VERSION: u32 = 1;

/// Lowercased terms split on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexParams {
    pub k1: f64,
    pub b: f64,
}

impl IndexParams {
    pub fn new(k1: f64, b: f64) -> Result<Self> {
        let p = Self { k1, b };
        p.validate()?;
        Ok(p)
    }

    /// QReCC setting.
    pub fn qrecc() -> Self {
        Self { k1: 0.82, b: 0.68 }
    }

    /// TopiOCQA / SciConvQA setting.
    pub fn topiocqa() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k1.is_finite() && self.k1 > 0.0) {
            return Err(Error::Parameter(format!(
                "k1 must be positive, got {}",
                self.k1
            )));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Parameter(format!(
                "b must lie in [0, 1], got {}",
                self.b
            )));
        }
        Ok(())
    }
}

impl Default for IndexParams {
    fn default() -> Self {
        Self::topiocqa()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPassage {
    pub id: String,
    pub score: f64,
}

/// Ranked output of a retriever, best first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankedRetrieval {
    pub entries: Vec<ScoredPassage>,
    pub query: String,
}

impl RankedRetrieval {
    pub fn empty(query: impl Into<String>) -> Self {
        Self {
            entries: Vec::new(),
            query: query.into(),
        }
    }

    pub fn from_ids<S: Into<String>>(query: &str, ids: impl IntoIterator<Item = S>) -> Self {
        let ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        let n = ids.len();
        Self {
            entries: ids
                .into_iter()
                .enumerate()
                .map(|(i, id)| ScoredPassage {
                    id,
                    score: (n - i) as f64,
                })
                .collect(),
            query: query.to_string(),
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.entries.truncate(n);
    }
}

/// Anything that maps a query string to a ranked passage list.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, top_n: usize) -> Result<RankedRetrieval>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    params: IndexParams,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    index: InvertedIndex,
}

impl InvertedIndex {
    pub fn build(corpus: &Corpus, params: IndexParams) -> Result<Self> {
        params.validate()?;
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        for (pos, passage) in corpus.iter().enumerate() {
            let terms = tokenize(&passage.text);
            doc_lengths.push(terms.len() as u32);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: pos as u32,
                    tf: count,
                });
            }
        }
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64
        };
        Ok(Self {
            params,
            doc_ids: corpus.iter().map(|p| p.id.clone()).collect(),
            doc_lengths,
            avg_doc_length,
            postings,
        })
    }

    pub fn params(&self) -> IndexParams {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    pub fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, tf: u32, doc_len: u32) -> f64 {
        let IndexParams { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * doc_len as f64 / self.avg_doc_length;
        tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = IndexFile {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            index: self.clone(),
        };
        fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: IndexFile = serde_json::from_slice(&fs::read(path)?)?;
        if file.format != INDEX_FORMAT || file.version != INDEX_VERSION {
            return Err(Error::Validation(format!(
                "{}: unsupported index format {} v{} (expected {INDEX_FORMAT} v{INDEX_VERSION})",
                path.display(),
                file.format,
                file.version
            )));
        }
        Ok(file.index)
    }
}

impl Retriever for InvertedIndex {
    fn retrieve(&self, query: &str, top_n: usize) -> Result<RankedRetrieval> {
        if top_n == 0 {
            return Err(Error::Parameter("top_n must be at least 1".into()));
        }
        let terms = tokenize(query);
        if terms.is_empty() || self.doc_count() == 0 {
            return Ok(RankedRetrieval::empty(query));
        }
        let mut scores = vec![0.0f64; self.doc_count()];
        let mut hit = vec![false; self.doc_count()];
        for term in &terms {
            let postings = self.postings(term);
            if postings.is_empty() {
                continue;
            }
            let idf = self.idf(postings.len());
            for p in postings {
                let d = p.doc as usize;
                scores[d] += idf * self.term_weight(p.tf, self.doc_lengths[d]);
                hit[d] = true;
            }
        }
        let mut ranked: Vec<usize> = (0..scores.len())
            .filter(|&d| hit[d] && scores[d] > 0.0)
            .collect();
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        ranked.truncate(top_n);
        Ok(RankedRetrieval {
            entries: ranked
                .into_iter()
                .map(|d| ScoredPassage {
                    id: self.doc_ids[d].clone(),
                    score: scores[d],
                })
                .collect(),
            query: query.to_string(),
        })
    }
}

/// Test double answering configured queries verbatim.
#[derive(Debug, Clone, Default)]
pub struct MockRetriever {
    table: HashMap<String, RankedRetrieval>,
}

impl MockRetriever {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with<S: Into<String>>(mut self, query: &str, ids: impl IntoIterator<Item = S>) -> Self {
        self.table
            .insert(query.to_string(), RankedRetrieval::from_ids(query, ids));
        self
    }
}

impl Retriever for MockRetriever {
    fn retrieve(&self, query: &str, top_n: usize) -> Result<RankedRetrieval> {
        if top_n == 0 {
            return Err(Error::Parameter("top_n must be at least 1".into()));
        }
        let mut out = self
            .table
            .get(query)
            .cloned()
            .unwrap_or_else(|| RankedRetrieval::empty(query));
        out.truncate(top_n);
        Ok(out)
    }
}

/// Placeholder for a dense (embedding) retriever; no encoder ships with this crate.
#[derive(Debug, Clone, Default)]
pub struct DenseRetriever {
    pub model: String,
}

impl Retriever for DenseRetriever {
    fn retrieve(&self, _query: &str, _top_n: usize) -> Result<RankedRetrieval> {
        Err(Error::Unsupported(format!(
            "dense retrieval with {:?} is not implemented",
            self.model
        )))
    }
}
