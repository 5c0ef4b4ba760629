//! Okapi BM25 over an in-memory inverted index.
//!
//! Scores are generic over [`Scalar`]; the pipeline uses `f64`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

const INDEX_MAGIC: &[u8; 4] = b"PKGI";
const INDEX_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),
    #[error("unknown doc_id `{0}`")]
    UnknownDoc(String),
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed passage at line {line}: {reason}")]
    MalformedPassage { line: usize, reason: String },
    #[error("bad index file: {0}")]
    BadIndexFile(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub doc_id: String,
    pub text: String,
}

impl Passage {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Passage {
            doc_id: doc_id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params<T> {
    pub k1: T,
    pub b: T,
}

impl<T: Scalar> Default for Bm25Params<T> {
    fn default() -> Self {
        Bm25Params {
            k1: T::from_f64_lossy(0.9),
            b: T::from_f64_lossy(0.4),
        }
    }
}

impl<T: Scalar> Bm25Params<T> {
    pub fn new(k1: T, b: T) -> Result<Self, RetrievalError> {
        let p = Bm25Params { k1, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !self.k1.is_finite() || self.k1 <= T::zero() {
            return Err(RetrievalError::InvalidParams(format!("k1 must be > 0, got {}", self.k1)));
        }
        if !(self.b >= T::zero() && self.b <= T::one()) {
            return Err(RetrievalError::InvalidParams(format!("b must be in [0, 1], got {}", self.b)));
        }
        Ok(())
    }
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posting {
    pub doc_id: String,
    pub term_frequency: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    /// Term to postings sorted by `doc_id`.
    pub postings: BTreeMap<String, Vec<Posting>>,
    pub doc_lengths: BTreeMap<String, usize>,
    pub avg_doc_length: f64,
    pub doc_count: usize,
    /// Passage text by `doc_id`, kept so a persisted index can serve retrieved text.
    texts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPassage<T> {
    pub doc_id: String,
    pub score: T,
}

pub fn build_index(passages: &[Passage]) -> Result<InvertedIndex, RetrievalError> {
    let mut postings: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
    let mut doc_lengths = BTreeMap::new();
    let mut texts = BTreeMap::new();
    for p in passages {
        if texts.insert(p.doc_id.clone(), p.text.clone()).is_some() {
            return Err(RetrievalError::DuplicateDocId(p.doc_id.clone()));
        }
        let tokens = tokenize(&p.text);
        doc_lengths.insert(p.doc_id.clone(), tokens.len());
        for t in tokens {
            *postings.entry(t).or_default().entry(p.doc_id.clone()).or_default() += 1;
        }
    }
    let doc_count = doc_lengths.len();
    let total: usize = doc_lengths.values().sum();
    let avg_doc_length = if doc_count == 0 { 0.0 } else { total as f64 / doc_count as f64 };
    let postings = postings
        .into_iter()
        .map(|(term, docs)| {
            let list = docs
                .into_iter()
                .map(|(doc_id, term_frequency)| Posting { doc_id, term_frequency })
                .collect();
            (term, list)
        })
        .collect();
    Ok(InvertedIndex {
        postings,
        doc_lengths,
        avg_doc_length,
        doc_count,
        texts,
    })
}

impl InvertedIndex {
    pub fn text(&self, doc_id: &str) -> Option<&str> {
        self.texts.get(doc_id).map(String::as_str)
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    fn term_frequency(&self, term: &str, doc_id: &str) -> u32 {
        self.postings
            .get(term)
            .and_then(|list| {
                list.binary_search_by(|p| p.doc_id.as_str().cmp(doc_id))
                    .ok()
                    .map(|i| list[i].term_frequency)
            })
            .unwrap_or(0)
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, floored at zero.
    pub fn idf<T: Scalar>(&self, term: &str) -> T {
        let n = T::from_usize_lossy(self.doc_count);
        let df = T::from_usize_lossy(self.document_frequency(term));
        let half = T::from_f64_lossy(0.5);
        let idf = (T::one() + (n - df + half) / (df + half)).ln();
        idf.max(T::zero())
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let payload = serde_json::to_vec(self).expect("index always serializes");
        let mut bytes = Vec::with_capacity(payload.len() + 13);
        bytes.extend_from_slice(INDEX_MAGIC);
        bytes.push(INDEX_VERSION);
        bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&payload);
        fs::write(path, bytes).map_err(|source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        if !path.exists() {
            return Err(RetrievalError::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RetrievalError> {
        let bad = |m: &str| RetrievalError::BadIndexFile(m.to_string());
        if bytes.len() < 13 || &bytes[..4] != INDEX_MAGIC {
            return Err(bad("missing PKGI magic"));
        }
        if bytes[4] != INDEX_VERSION {
            return Err(bad(&format!("unsupported version {}", bytes[4])));
        }
        let len = u64::from_le_bytes(bytes[5..13].try_into().expect("8-byte slice")) as usize;
        let payload = bytes.get(13..).filter(|p| p.len() == len).ok_or_else(|| bad("length prefix mismatch"))?;
        let index: InvertedIndex = serde_json::from_slice(payload).map_err(|e| bad(&e.to_string()))?;
        index.check_invariants().map_err(|m| bad(&m))?;
        Ok(index)
    }

    fn check_invariants(&self) -> Result<(), String> {
        if self.doc_count != self.doc_lengths.len() {
            return Err("doc_count disagrees with doc_lengths".into());
        }
        for (term, list) in &self.postings {
            if list.windows(2).any(|w| w[0].doc_id >= w[1].doc_id) {
                return Err(format!("postings for `{term}` not sorted"));
            }
            if list
                .iter()
                .any(|p| p.term_frequency == 0 || !self.doc_lengths.contains_key(&p.doc_id))
            {
                return Err(format!("bad posting under `{term}`"));
            }
        }
        Ok(())
    }
}

/// BM25 score of one document for the given (already tokenized) query terms.
pub fn score<T: Scalar>(
    index: &InvertedIndex,
    params: &Bm25Params<T>,
    query_terms: &[String],
    doc_id: &str,
) -> Result<T, RetrievalError> {
    let len = *index
        .doc_lengths
        .get(doc_id)
        .ok_or_else(|| RetrievalError::UnknownDoc(doc_id.to_string()))?;
    let len = T::from_usize_lossy(len);
    let avg = T::from_f64_lossy(index.avg_doc_length);
    let norm = if avg > T::zero() {
        params.k1 * (T::one() - params.b + params.b * len / avg)
    } else {
        params.k1
    };
    let mut total = T::zero();
    for term in query_terms {
        let tf = index.term_frequency(term, doc_id);
        if tf == 0 {
            continue;
        }
        let tf = T::from_usize_lossy(tf as usize);
        total = total + index.idf::<T>(term) * tf * (params.k1 + T::one()) / (tf + norm);
    }
    Ok(total)
}

/// Top-`k` documents by descending score, ties by ascending `doc_id`; zero scores excluded.
pub fn search<T: Scalar>(
    index: &InvertedIndex,
    params: &Bm25Params<T>,
    query: &str,
    k: usize,
) -> Vec<ScoredPassage<T>> {
    let terms = tokenize(query);
    let mut candidates: Vec<&str> = terms
        .iter()
        .filter_map(|t| index.postings.get(t))
        .flatten()
        .map(|p| p.doc_id.as_str())
        .collect();
    candidates.sort_unstable();
    candidates.dedup();
    let mut scored: Vec<ScoredPassage<T>> = candidates
        .into_iter()
        .map(|d| ScoredPassage {
            doc_id: d.to_string(),
            score: score(index, params, &terms, d).expect("candidate comes from the index"),
        })
        .filter(|s| s.score > T::zero())
        .collect();
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    scored.truncate(k);
    scored
}

/// Retrieved background: texts of the top `top_n` hits joined by newlines.
pub fn retrieve_background(index: &InvertedIndex, params: &Bm25Params<f64>, query: &str, top_n: usize) -> String {
    search(index, params, query, top_n.max(1))
        .iter()
        .filter_map(|s| index.text(&s.doc_id))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Reads a passage store: one `{"doc_id", "text"}` object per line.
pub fn load_passages(path: &Path) -> Result<Vec<Passage>, RetrievalError> {
    if !path.exists() {
        return Err(RetrievalError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut seen = HashMap::new();
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let p: Passage = serde_json::from_str(line).map_err(|e| RetrievalError::MalformedPassage {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if p.text.is_empty() {
                return Err(RetrievalError::MalformedPassage {
                    line: i + 1,
                    reason: "empty text".into(),
                });
            }
            if seen.insert(p.doc_id.clone(), ()).is_some() {
                return Err(RetrievalError::DuplicateDocId(p.doc_id));
            }
            Ok(p)
        })
        .collect()
}
