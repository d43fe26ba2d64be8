//! Corpus embedding index and exact cosine k-nearest-neighbour search.
//!
//! Index file layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "MTINDEX1"
//! count    u64
//! d_model  u64
//! digest   64 bytes hex model digest
//! values   f64 x count x d_model, row-major, unit rows
//! ```
//!
//! Ids and texts live in a JSONL sidecar, one `{"sentence_id", "text"}` per row.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderError, SentenceEncoder};
use crate::linearize::{encode, linearize_sentence, LinearizeError, Vocabulary};
use crate::numcore::checkpoint::sha256_hex;
use crate::semform::SentenceRecord;

pub const INDEX_MAGIC: &[u8; 8] = b"MTINDEX1";
const DIGEST_LEN: usize = 64;
const HEADER_LEN: usize = 8 + 8 + 8 + DIGEST_LEN;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index from an empty corpus")]
    Empty,
    #[error("embedding of `{0}` has zero norm")]
    Degenerate(String),
    #[error("k must be between 1 and {size}, got {k}")]
    Range { k: usize, size: usize },
    #[error("expected a {expected}-dimensional vector, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("index was built with model {index}, but the encoder is {encoder}")]
    ModelMismatch { index: String, encoder: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Linearize(#[from] LinearizeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub sentence_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub rank: usize,
    pub sentence_id: String,
    pub text: String,
    pub score: f64,
}

/// Immutable after construction; search is a dot product against unit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    d_model: usize,
    model_digest: String,
    rows: Vec<f64>,
    entries: Vec<IndexEntry>,
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|x| x / norm).collect())
}

impl EmbeddingIndex {
    pub fn new(d_model: usize, model_digest: impl Into<String>) -> Self {
        EmbeddingIndex {
            d_model,
            model_digest: model_digest.into(),
            rows: Vec::new(),
            entries: Vec::new(),
        }
    }

    /// Normalizes and appends `vector`; zero vectors are rejected.
    pub fn insert(&mut self, entry: IndexEntry, vector: &[f64]) -> Result<(), RetrievalError> {
        if vector.len() != self.d_model {
            return Err(RetrievalError::Dimension {
                expected: self.d_model,
                got: vector.len(),
            });
        }
        let u = unit(vector).ok_or_else(|| RetrievalError::Degenerate(entry.sentence_id.clone()))?;
        self.rows.extend(u);
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn model_digest(&self) -> &str {
        &self.model_digest
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d_model..(i + 1) * self.d_model]
    }

    /// Exact top-k by cosine similarity, descending; equal scores keep
    /// insertion order.
    pub fn knn_vector(&self, query: &[f64], k: usize) -> Result<Vec<Hit>, RetrievalError> {
        if k == 0 || k > self.len() {
            return Err(RetrievalError::Range { k, size: self.len() });
        }
        if query.len() != self.d_model {
            return Err(RetrievalError::Dimension {
                expected: self.d_model,
                got: query.len(),
            });
        }
        let q = unit(query).ok_or_else(|| RetrievalError::Degenerate("query".into()))?;
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|i| (self.row(i).iter().zip(&q).map(|(a, b)| a * b).sum(), i))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(r, (score, i))| Hit {
                rank: r + 1,
                sentence_id: self.entries[i].sentence_id.clone(),
                text: self.entries[i].text.clone(),
                score,
            })
            .collect())
    }

    pub fn knn(
        &self,
        query: &str,
        k: usize,
        encoder: &SentenceEncoder,
        vocab: &Vocabulary,
    ) -> Result<Vec<Hit>, RetrievalError> {
        let digest = encoder.digest();
        if digest != self.model_digest {
            return Err(RetrievalError::ModelMismatch {
                index: self.model_digest.clone(),
                encoder: digest,
            });
        }
        if k == 0 || k > self.len() {
            return Err(RetrievalError::Range { k, size: self.len() });
        }
        let input = encode(&linearize_sentence(query)?, vocab, encoder.config.max_len)?.trimmed();
        let e = encoder.encode_sequence(&input)?;
        self.knn_vector(e.as_slice(), k)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.rows.len() * 8);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.d_model as u64).to_le_bytes());
        let mut digest = self.model_digest.as_bytes().to_vec();
        digest.resize(DIGEST_LEN, b' ');
        out.extend_from_slice(&digest[..DIGEST_LEN]);
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn sidecar_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serialization") + "\n")
            .collect()
    }

    /// SHA-256 over the index file bytes followed by the sidecar.
    pub fn digest(&self) -> String {
        let mut b = self.to_bytes();
        b.extend_from_slice(self.sidecar_jsonl().as_bytes());
        sha256_hex(&b)
    }

    pub fn from_parts(bytes: &[u8], sidecar: &str, path: &Path) -> Result<Self, RetrievalError> {
        let bad = |message: String| RetrievalError::Format {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < HEADER_LEN || &bytes[..8] != INDEX_MAGIC {
            return Err(bad("not an embedding index".into()));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
        let (count, d_model) = (u64_at(8), u64_at(16));
        let model_digest = std::str::from_utf8(&bytes[24..HEADER_LEN])
            .map_err(|_| bad("model digest is not UTF-8".into()))?
            .trim_end()
            .to_string();
        let expected = count
            .checked_mul(d_model)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad("header sizes overflow".into()))?;
        if bytes.len() - HEADER_LEN != expected {
            return Err(bad(format!(
                "expected {expected} value bytes, found {}",
                bytes.len() - HEADER_LEN
            )));
        }
        let rows = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let entries = sidecar
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(format!("sidecar line {}: {e}", i + 1))))
            .collect::<Result<Vec<IndexEntry>, _>>()?;
        if entries.len() != count {
            return Err(bad(format!("{count} vectors but {} sidecar entries", entries.len())));
        }
        Ok(EmbeddingIndex {
            d_model,
            model_digest,
            rows,
            entries,
        })
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".jsonl");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |source| RetrievalError::Io { path: p, source }
        };
        fs::write(path, self.to_bytes()).map_err(io(path))?;
        let side = Self::sidecar_path(path);
        fs::write(&side, self.sidecar_jsonl()).map_err(io(&side))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |source| RetrievalError::Io { path: p, source }
        };
        let bytes = fs::read(path).map_err(io(path))?;
        let side = Self::sidecar_path(path);
        let sidecar = fs::read_to_string(&side).map_err(io(&side))?;
        Self::from_parts(&bytes, &sidecar, path)
    }
}

/// Embeds every record's sentence with `encoder` in corpus order.
pub fn build_index(
    records: &[SentenceRecord],
    encoder: &SentenceEncoder,
    vocab: &Vocabulary,
) -> Result<EmbeddingIndex, RetrievalError> {
    if records.is_empty() {
        return Err(RetrievalError::Empty);
    }
    let inputs = records
        .iter()
        .map(|r| Ok(encode(&linearize_sentence(&r.text)?, vocab, encoder.config.max_len)?.trimmed()))
        .collect::<Result<Vec<_>, LinearizeError>>()?;
    let embeddings = encoder.encode_batch(&inputs)?;
    let mut index = EmbeddingIndex::new(encoder.config.d_model, encoder.digest());
    for (r, e) in records.iter().zip(embeddings) {
        index.insert(
            IndexEntry {
                sentence_id: r.sentence_id.clone(),
                text: r.text.clone(),
            },
            e.as_slice(),
        )?;
    }
    Ok(index)
}
