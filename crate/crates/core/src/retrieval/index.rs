use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{tokenize, RetrievalError};

/// One memory entry: the caption is the retrieval key, the image reference
/// is the value handed back with it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTextPair {
    pub id: String,
    pub caption: String,
    pub image_ref: String,
}

/// Okapi BM25 free parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Dense internal document number, assigned in ingestion order.
pub type DocId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: DocId,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pair: ImageTextPair,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub pairs: Vec<ScoredPair>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Inverted index over caption tokens. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub(crate) params: Bm25Params,
    pub(crate) docs: Vec<ImageTextPair>,
    pub(crate) doc_lengths: Vec<u32>,
    pub(crate) avg_doc_len: f64,
    pub(crate) postings: BTreeMap<String, Vec<Posting>>,
}

/// Why a pair was left out of the index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedPair {
    pub id: String,
    pub reason: &'static str,
}

/// Streaming builder: pairs are tokenized as they arrive and only the
/// caption/reference strings are retained.
pub struct IndexBuilder {
    params: Bm25Params,
    seen: HashSet<String>,
    docs: Vec<ImageTextPair>,
    doc_lengths: Vec<u32>,
    postings: HashMap<String, Vec<Posting>>,
    skipped: Vec<SkippedPair>,
}

impl IndexBuilder {
    pub fn new(params: Bm25Params) -> Self {
        Self {
            params,
            seen: HashSet::new(),
            docs: Vec::new(),
            doc_lengths: Vec::new(),
            postings: HashMap::new(),
            skipped: Vec::new(),
        }
    }

    /// Adds one pair. Returns `Ok(false)` when the caption has no tokens and
    /// the pair was skipped.
    pub fn add(&mut self, pair: ImageTextPair) -> Result<bool, RetrievalError> {
        if !self.seen.insert(pair.id.clone()) {
            return Err(RetrievalError::DuplicateId(pair.id));
        }
        let terms = tokenize(&pair.caption);
        if terms.is_empty() {
            log::warn!("skipping pair {:?}: caption has no tokens", pair.id);
            self.skipped.push(SkippedPair {
                id: pair.id,
                reason: "caption has no tokens",
            });
            return Ok(false);
        }
        let doc = DocId::try_from(self.docs.len()).map_err(|_| RetrievalError::TooManyDocs)?;
        let mut counts: HashMap<String, u32> = HashMap::new();
        for t in &terms {
            *counts.entry(t.clone()).or_default() += 1;
        }
        for (term, tf) in counts {
            self.postings.entry(term).or_default().push(Posting { doc, tf });
        }
        self.doc_lengths.push(terms.len() as u32);
        self.docs.push(pair);
        Ok(true)
    }

    pub fn skipped(&self) -> &[SkippedPair] {
        &self.skipped
    }

    pub fn finish(self) -> (RetrievalIndex, Vec<SkippedPair>) {
        let total: u64 = self.doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_len = if self.docs.is_empty() {
            0.0
        } else {
            total as f64 / self.docs.len() as f64
        };
        let index = RetrievalIndex {
            params: self.params,
            docs: self.docs,
            doc_lengths: self.doc_lengths,
            avg_doc_len,
            // Docs are appended in id order, so each list is already sorted.
            postings: self.postings.into_iter().collect(),
        };
        (index, self.skipped)
    }
}

impl RetrievalIndex {
    /// Builds an index, skipping (and logging) pairs whose captions have no tokens.
    pub fn build<I>(corpus: I, params: Bm25Params) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = ImageTextPair>,
    {
        Ok(Self::build_with_report(corpus, params)?.0)
    }

    pub fn build_with_report<I>(
        corpus: I,
        params: Bm25Params,
    ) -> Result<(Self, Vec<SkippedPair>), RetrievalError>
    where
        I: IntoIterator<Item = ImageTextPair>,
    {
        let mut builder = IndexBuilder::new(params);
        for pair in corpus {
            builder.add(pair)?;
        }
        Ok(builder.finish())
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc(&self, doc: DocId) -> Option<&ImageTextPair> {
        self.docs.get(doc as usize)
    }

    pub fn doc_len(&self, doc: DocId) -> Option<u32> {
        self.doc_lengths.get(doc as usize).copied()
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    /// Lucene-style non-negative inverse document frequency.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.postings(term).len() as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, doc_len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * doc_len as f64 / self.avg_doc_len;
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// BM25 score of one document. Repeated query terms count once.
    pub fn bm25_score(&self, query_terms: &[String], doc: DocId) -> Result<f64, RetrievalError> {
        let doc_len = self.doc_len(doc).ok_or(RetrievalError::UnknownDoc(doc))?;
        let mut score = 0.0;
        for term in unique_terms(query_terms) {
            let list = self.postings(term);
            if let Ok(i) = list.binary_search_by_key(&doc, |p| p.doc) {
                score += self.term_weight(self.idf(term), list[i].tf, doc_len);
            }
        }
        Ok(score)
    }

    /// Top-`k` pairs by BM25 score; ties go to the lower doc id. Only
    /// documents sharing at least one term with the query are returned.
    pub fn retrieve(&self, query: &str, k: usize) -> Result<RetrievalResult, RetrievalError> {
        self.retrieve_excluding(query, k, None)
    }

    /// As [`retrieve`](Self::retrieve), dropping the pair whose id equals `exclude`.
    pub fn retrieve_excluding(
        &self,
        query: &str,
        k: usize,
        exclude: Option<&str>,
    ) -> Result<RetrievalResult, RetrievalError> {
        if k < 1 {
            return Err(RetrievalError::InvalidK(k));
        }
        let terms = tokenize(query);
        let mut acc: HashMap<DocId, f64> = HashMap::new();
        // Accumulate term by term in query order so sums match bm25_score bit for bit.
        for term in unique_terms(&terms) {
            let idf = self.idf(term);
            for p in self.postings(term) {
                let w = self.term_weight(idf, p.tf, self.doc_lengths[p.doc as usize]);
                *acc.entry(p.doc).or_insert(0.0) += w;
            }
        }
        let mut ranked: Vec<(DocId, f64)> = acc
            .into_iter()
            .filter(|&(d, s)| s > 0.0 && exclude != Some(self.docs[d as usize].id.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        Ok(RetrievalResult {
            query: query.to_owned(),
            pairs: ranked
                .into_iter()
                .map(|(d, score)| ScoredPair {
                    pair: self.docs[d as usize].clone(),
                    score,
                })
                .collect(),
        })
    }
}

/// First-occurrence order, duplicates removed.
fn unique_terms(terms: &[String]) -> impl Iterator<Item = &str> {
    let mut seen = HashSet::new();
    terms
        .iter()
        .map(String::as_str)
        .filter(move |t| seen.insert(*t))
}
