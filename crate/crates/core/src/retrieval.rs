//! The two retrieval engines behind one exact top-K interface: Okapi BM25
//! over element document text, and brute-force cosine search over encoder
//! embeddings. Both rank by (score desc, name asc, kind, parent), so ties
//! are deterministic, and both restrict candidates by element kind on
//! request. Indexes are immutable after build; concurrent queries are safe.

use crate::corpus::{Element, ElementKind};
use crate::encoder::EncoderModel;
use crate::text::tokenize;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

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

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub element: Element,
    pub score: f64,
}

/// Ranked hits, scores non-increasing.
pub type RetrievalResult = Vec<SearchHit>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RetrieveError {
    #[error("index has no documents")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("model fingerprint {model:#018x} does not match index fingerprint {index:#018x}")]
    FingerprintMismatch { model: u64, index: u64 },
}

pub trait Retriever {
    fn topk(
        &self,
        query: &str,
        k: usize,
        kind: Option<ElementKind>,
    ) -> Result<RetrievalResult, RetrieveError>;
}

/// Instruction queries start with a "Represent this X for searching
/// relevant Y:" line. The lexical engine drops it (every instruction
/// shares those words); the dense engine keeps it, since the header is
/// what makes the encoder task-aware.
pub fn strip_instruction_header(query: &str) -> &str {
    match query.split_once('\n') {
        Some((first, rest)) if first.trim_end().ends_with(':') && !rest.trim().is_empty() => rest,
        _ => query,
    }
}

fn compare_ranked(a: &(usize, f64), b: &(usize, f64), elements: &[Element]) -> Ordering {
    let (ea, eb) = (&elements[a.0], &elements[b.0]);
    b.1.total_cmp(&a.1)
        .then_with(|| ea.name.cmp(&eb.name))
        .then_with(|| ea.kind.cmp(&eb.kind))
        .then_with(|| ea.parent.cmp(&eb.parent))
}

fn rank(elements: &[Element], mut scored: Vec<(usize, f64)>, k: usize) -> RetrievalResult {
    scored.sort_by(|a, b| compare_ranked(a, b, elements));
    scored.truncate(k);
    scored
        .into_iter()
        .map(|(id, score)| SearchHit {
            element: elements[id].clone(),
            score,
        })
        .collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("doc id {doc} out of range ({count} documents)")]
pub struct UnknownDocError {
    pub doc: usize,
    pub count: usize,
}

/// Okapi BM25 inverted index over each element's document rendering,
/// tokenized the same way as the encoder's word features.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    params: Bm25Params,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    doc_lengths: Vec<u32>,
    avg_len: f64,
    elements: Vec<Element>,
}

impl Bm25Index {
    pub fn build(elements: &[Element], params: Bm25Params) -> Self {
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(elements.len());
        for (id, element) in elements.iter().enumerate() {
            let tokens = tokenize(&element.document_text());
            doc_lengths.push(tokens.len() as u32);
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for token in tokens {
                *counts.entry(token).or_default() += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push((id as u32, tf));
            }
        }
        let avg_len = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / doc_lengths.len() as f64
        };
        Self {
            params,
            postings,
            doc_lengths,
            avg_len,
            elements: elements.to_vec(),
        }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lengths.is_empty()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_len
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn element(&self, doc: usize) -> Option<&Element> {
        self.elements.get(doc)
    }

    /// Number of documents containing the term.
    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// ln(1 + (N - df + 0.5)/(df + 0.5)), never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df(term) as f64;
        let n = self.doc_count() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, tf: u32, doc_len: u32) -> f64 {
        term_weight(tf, doc_len, self.avg_len, self.params)
    }

    /// BM25 score of one document for a raw query string. Duplicate query
    /// terms count once; terms absent from the document contribute 0.
    pub fn score(&self, query: &str, doc: usize) -> Result<f64, UnknownDocError> {
        if doc >= self.doc_count() {
            return Err(UnknownDocError {
                doc,
                count: self.doc_count(),
            });
        }
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let mut total = 0.0;
        for term in &terms {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            let Ok(slot) = postings.binary_search_by_key(&(doc as u32), |&(d, _)| d) else {
                continue;
            };
            total += self.idf(term) * self.term_weight(postings[slot].1, self.doc_lengths[doc]);
        }
        Ok(total)
    }
}

fn term_weight(tf: u32, doc_len: u32, avg_len: f64, params: Bm25Params) -> f64 {
    let tf = f64::from(tf);
    let norm = params.k1 * (1.0 - params.b + params.b * f64::from(doc_len) / avg_len);
    tf * (params.k1 + 1.0) / (tf + norm)
}

impl Retriever for Bm25Index {
    fn topk(
        &self,
        query: &str,
        k: usize,
        kind: Option<ElementKind>,
    ) -> Result<RetrievalResult, RetrieveError> {
        if k == 0 {
            return Err(RetrieveError::InvalidK);
        }
        if self.is_empty() {
            return Err(RetrieveError::EmptyIndex);
        }
        let terms: BTreeSet<String> = tokenize(strip_instruction_header(query))
            .into_iter()
            .collect();
        let mut scores = vec![0.0f64; self.doc_count()];
        for term in &terms {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for &(doc, tf) in postings {
                scores[doc as usize] += idf * self.term_weight(tf, self.doc_lengths[doc as usize]);
            }
        }
        let scored: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|&(id, _)| kind.map_or(true, |want| self.elements[id].kind == want))
            .collect();
        Ok(rank(&self.elements, scored, k))
    }
}

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("index file too short")]
    Truncated,
    #[error("bad index magic")]
    BadMagic,
    #[error("unsupported index version {0}")]
    BadVersion(u16),
    #[error("trailing bytes after embedding matrix")]
    TrailingBytes,
    #[error("metadata has {metadata} entries for {rows} matrix rows")]
    Misaligned { rows: usize, metadata: usize },
    #[error("embedding {index} has dimension {got}, expected {expected}")]
    Dimension {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("row {row} has norm {norm}, expected 1")]
    NotUnit { row: usize, norm: f64 },
}

pub const INDEX_MAGIC: &[u8; 6] = b"FRAGIX";
pub const INDEX_VERSION: u16 = 1;
const INDEX_HEADER_LEN: usize = 6 + 2 + 4 + 4 + 8;
const UNIT_TOLERANCE: f64 = 1e-6;

/// Exact dense retrieval index: one unit embedding row per element, plus
/// the fingerprint of the model that produced the rows. Queries must be
/// embedded by that same model.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    embed_dim: usize,
    model_fingerprint: u64,
    rows: Vec<f32>,
    elements: Vec<Element>,
}

impl DenseIndex {
    pub fn build(model: &EncoderModel, elements: &[Element]) -> Self {
        let mut rows = Vec::with_capacity(elements.len() * model.embed_dim);
        for element in elements {
            rows.extend(model.embed(&element.document_text()));
        }
        Self {
            embed_dim: model.embed_dim,
            model_fingerprint: model.fingerprint(),
            rows,
            elements: elements.to_vec(),
        }
    }

    /// Assemble an index from externally produced embeddings (for a remote
    /// encoder). Rows must already be unit vectors.
    pub fn from_embeddings(
        embeddings: &[Vec<f32>],
        elements: &[Element],
        embed_dim: usize,
        model_fingerprint: u64,
    ) -> Result<Self, IndexError> {
        if embeddings.len() != elements.len() {
            return Err(IndexError::Misaligned {
                rows: embeddings.len(),
                metadata: elements.len(),
            });
        }
        let mut rows = Vec::with_capacity(embeddings.len() * embed_dim);
        for (index, row) in embeddings.iter().enumerate() {
            if row.len() != embed_dim {
                return Err(IndexError::Dimension {
                    index,
                    expected: embed_dim,
                    got: row.len(),
                });
            }
            rows.extend_from_slice(row);
        }
        let built = Self {
            embed_dim,
            model_fingerprint,
            rows,
            elements: elements.to_vec(),
        };
        built.check_norms()?;
        Ok(built)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn model_fingerprint(&self) -> u64 {
        self.model_fingerprint
    }

    pub fn element(&self, row: usize) -> Option<&Element> {
        self.elements.get(row)
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.rows[row * self.embed_dim..(row + 1) * self.embed_dim]
    }

    fn check_norms(&self) -> Result<(), IndexError> {
        for row in 0..self.len() {
            let norm = self
                .row(row)
                .iter()
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(IndexError::NotUnit { row, norm });
            }
        }
        Ok(())
    }

    /// Binary image: magic, version, embed_dim, row count, model
    /// fingerprint, then the row-major f32 matrix, all little-endian.
    /// Element metadata travels in the JSONL sidecar instead.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(INDEX_HEADER_LEN + self.rows.len() * 4);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.embed_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.model_fingerprint.to_le_bytes());
        for value in &self.rows {
            out.extend_from_slice(&value.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], elements: Vec<Element>) -> Result<Self, IndexError> {
        if bytes.len() < INDEX_HEADER_LEN {
            return Err(IndexError::Truncated);
        }
        if &bytes[..6] != INDEX_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[6], bytes[7]]);
        if version != INDEX_VERSION {
            return Err(IndexError::BadVersion(version));
        }
        let embed_dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let row_count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let model_fingerprint = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let expected = row_count
            .checked_mul(embed_dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or(IndexError::Truncated)?;
        let data = &bytes[INDEX_HEADER_LEN..];
        if data.len() < expected {
            return Err(IndexError::Truncated);
        }
        if data.len() > expected {
            return Err(IndexError::TrailingBytes);
        }
        if elements.len() != row_count {
            return Err(IndexError::Misaligned {
                rows: row_count,
                metadata: elements.len(),
            });
        }
        let rows: Vec<f32> = data
            .chunks_exact(4)
            .map(|chunk| f32::from_le_bytes(chunk.try_into().unwrap()))
            .collect();
        let built = Self {
            embed_dim,
            model_fingerprint,
            rows,
            elements,
        };
        built.check_norms()?;
        Ok(built)
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.meta.jsonl", path.display()))
}

pub fn save_dense_index(index: &DenseIndex, path: &Path) -> Result<(), IndexError> {
    std::fs::write(path, index.to_bytes())?;
    let mut sidecar = std::io::BufWriter::new(std::fs::File::create(sidecar_path(path))?);
    for element in index.elements() {
        serde_json::to_writer(&mut sidecar, element)?;
        sidecar.write_all(b"\n")?;
    }
    sidecar.flush()?;
    Ok(())
}

pub fn load_dense_index(path: &Path) -> Result<DenseIndex, IndexError> {
    let bytes = std::fs::read(path)?;
    let sidecar = std::io::BufReader::new(std::fs::File::open(sidecar_path(path))?);
    let mut elements = Vec::new();
    for line in sidecar.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        elements.push(serde_json::from_str(&line)?);
    }
    DenseIndex::from_bytes(&bytes, elements)
}

/// Cosine similarity; for unit vectors this is the dot product.
pub fn cosine(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum()
}

/// A dense index paired with the model that embeds its queries.
#[derive(Debug, Clone, Copy)]
pub struct DenseRetriever<'a> {
    pub index: &'a DenseIndex,
    pub model: &'a EncoderModel,
}

impl Retriever for DenseRetriever<'_> {
    fn topk(
        &self,
        query: &str,
        k: usize,
        kind: Option<ElementKind>,
    ) -> Result<RetrievalResult, RetrieveError> {
        if k == 0 {
            return Err(RetrieveError::InvalidK);
        }
        if self.index.is_empty() {
            return Err(RetrieveError::EmptyIndex);
        }
        let model_fingerprint = self.model.fingerprint();
        if model_fingerprint != self.index.model_fingerprint() {
            return Err(RetrieveError::FingerprintMismatch {
                model: model_fingerprint,
                index: self.index.model_fingerprint(),
            });
        }
        let query_vec = self.model.embed(query);
        let scored: Vec<(usize, f64)> = (0..self.index.len())
            .filter(|&row| {
                kind.map_or(true, |want| self.index.elements()[row].kind == want)
            })
            .map(|row| (row, cosine(&query_vec, self.index.row(row))))
            .collect();
        Ok(rank(self.index.elements(), scored, k))
    }
}
