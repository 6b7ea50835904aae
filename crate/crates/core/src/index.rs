//! Cached document embeddings and exhaustive cosine search.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{forward_hidden, ModelParams};
use crate::reconstruct::{DocRef, Document};
use crate::tensor::{dot, l2_norm, Mat};
use crate::trainer::document_input;

const MAGIC: &[u8; 8] = b"RTGNINDX";
const VERSION: u32 = 1;
const WHAT: &str = "index";

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    /// One unit-norm row per `[RD]`.
    pub embeddings: Mat,
    pub refs: Vec<DocRef>,
    pub model_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub doc_ref: DocRef,
    pub row: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub hits: Vec<Hit>,
    /// Set when `top_k` exceeded the index size and was clipped.
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub index: RetrievalIndex,
    pub warnings: Vec<String>,
}

fn unit(v: &[f64], what: &'static str) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    let n = l2_norm(v);
    if n == 0.0 {
        return Err(Error::ZeroNorm(what));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Normalized hidden rows at every `[RD]` of one document.
pub fn embed_document(params: &ModelParams, doc: &Document) -> Result<Vec<Vec<f64>>> {
    let input = document_input(doc);
    if input.len() > params.config.max_seq_len {
        return Err(Error::DocumentTooLong {
            doc_id: doc.doc_id.clone(),
            len: input.len(),
            max: params.config.max_seq_len,
        });
    }
    let hidden = forward_hidden(params, &input)?;
    doc.rd_positions
        .iter()
        .map(|&p| unit(hidden.row(p + 1), "document embedding"))
        .collect()
}

pub fn embed_documents(params: &ModelParams, corpus: &[Document]) -> Result<RetrievalIndex> {
    let d = params.config.d_model;
    let mut data = Vec::new();
    let mut refs = Vec::new();
    for doc in corpus {
        for (k, row) in embed_document(params, doc)?.into_iter().enumerate() {
            data.extend(row);
            refs.push(DocRef::new(doc.doc_id.clone(), k));
        }
    }
    Ok(RetrievalIndex {
        embeddings: Mat::from_vec(refs.len(), d, data),
        refs,
        model_fingerprint: params.fingerprint(),
    })
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols
    }

    /// Top-k rows by cosine, descending, ties by row index.
    pub fn query(&self, q: &[f64], top_k: usize) -> Result<QueryResult> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if top_k < 1 {
            return Err(Error::InvalidInput("top_k must be >= 1".into()));
        }
        if q.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "query of length {} for index of dim {}",
                q.len(),
                self.dim()
            )));
        }
        let qh = unit(q, "query")?;
        let scores: Vec<f64> = (0..self.len())
            .map(|i| dot(self.embeddings.row(i), &qh).clamp(-1.0, 1.0))
            .collect();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let k = top_k.min(self.len());
        Ok(QueryResult {
            hits: order[..k]
                .iter()
                .map(|&row| Hit {
                    doc_ref: self.refs[row].clone(),
                    row,
                    score: scores[row],
                })
                .collect(),
            clipped: top_k > self.len(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        b.extend_from_slice(&(self.len() as u64).to_le_bytes());
        put_str(&mut b, &self.model_fingerprint);
        for r in &self.refs {
            put_str(&mut b, &r.doc_id);
            b.extend_from_slice(&(r.rd_index as u64).to_le_bytes());
        }
        for v in &self.embeddings.data {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::BadFormat { what: WHAT });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch {
                what: WHAT,
                found: version,
                expected: VERSION,
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Checksum(WHAT));
        }
        let mut r = Reader { b: body, at: 12 };
        let d = r.u64()? as usize;
        let rows = r.u64()? as usize;
        if rows == 0 {
            return Err(Error::EmptyIndex);
        }
        let model_fingerprint = r.string()?;
        let mut refs = Vec::with_capacity(rows);
        for _ in 0..rows {
            let id = r.string()?;
            refs.push(DocRef::new(id, r.u64()? as usize));
        }
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows * d {
            data.push(f64::from_bits(r.u64()?));
        }
        if r.at != body.len() {
            return Err(Error::BadFormat { what: WHAT });
        }
        Ok(RetrievalIndex {
            embeddings: Mat::from_vec(rows, d, data),
            refs,
            model_fingerprint,
        })
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .b
            .get(self.at..self.at + n)
            .ok_or(Error::BadFormat { what: WHAT })?;
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::BadFormat { what: WHAT })
    }
}

pub fn save_index(index: &RetrievalIndex, path: &Path) -> Result<()> {
    let bytes = index.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads an index. When `expected_fingerprint` is given and differs from the
/// one recorded in the file, the report carries a warning.
pub fn load_index(path: &Path, expected_fingerprint: Option<&str>) -> Result<LoadReport> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let index = RetrievalIndex::from_bytes(&bytes)?;
    let mut warnings = Vec::new();
    if let Some(fp) = expected_fingerprint {
        if fp != index.model_fingerprint {
            warnings.push(format!(
                "index was built by model {} but the loaded model is {}",
                short(&index.model_fingerprint),
                short(fp)
            ));
        }
    }
    Ok(LoadReport { index, warnings })
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}
