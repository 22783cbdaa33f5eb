//! Deterministic text encoding: tokenizer, signed feature-hashed bag of
//! n-grams, and the similarity functions used by retrieval.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::sha256_hex;

/// Lowercased tokens in input order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<String>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn to_set(&self) -> TokenSet {
        TokenSet::from_tokens(self.0.iter().cloned())
    }
}

/// Splits on every non-alphanumeric character and lowercases. Punctuation is dropped.
pub fn tokenize(text: &str) -> TokenSequence {
    TokenSequence(
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect(),
    )
}

/// Sorted, deduplicated token set used for lexical (Jaccard) similarity.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSet(Vec<String>);

impl TokenSet {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let set: BTreeSet<String> = tokens.into_iter().collect();
        TokenSet(set.into_iter().collect())
    }

    pub fn from_text(text: &str) -> Self {
        tokenize(text).to_set()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.binary_search_by(|t| t.as_str().cmp(token)).is_ok()
    }

    /// Size of the intersection, by merge over the sorted vectors.
    pub fn intersection_len(&self, other: &TokenSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Dot,
    Lexical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Unit,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub norm_mode: NormMode,
}

impl EmbeddingVector {
    pub fn zeros(dimension: usize) -> Self {
        EmbeddingVector {
            values: vec![0.0; dimension],
            norm_mode: NormMode::Raw,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// L2 norm accumulated in f64, in index order.
    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

pub(crate) fn l2_norm(values: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for &v in values {
        let v = v as f64;
        acc += v * v;
    }
    acc.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub ngram_orders: Vec<usize>,
    pub hash_buckets: u64,
    pub hash_seed: u64,
    pub dimension: usize,
    pub metric: Metric,
    /// L2-normalize nonempty embeddings.
    pub normalize: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            ngram_orders: vec![1, 2],
            hash_buckets: 1 << 18,
            hash_seed: 0x5eed,
            dimension: 64,
            metric: Metric::Cosine,
            normalize: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::InvalidEncoderConfig("dimension must be positive".into()));
        }
        if self.ngram_orders.is_empty() {
            return Err(Error::InvalidEncoderConfig("ngram_orders must be nonempty".into()));
        }
        if self.ngram_orders.contains(&0) {
            return Err(Error::InvalidEncoderConfig("ngram order 0 is meaningless".into()));
        }
        if self.hash_buckets < self.dimension as u64 {
            return Err(Error::InvalidEncoderConfig(format!(
                "hash_buckets {} < dimension {}",
                self.hash_buckets, self.dimension
            )));
        }
        Ok(())
    }

    /// Stable digest of the fields that determine embeddings.
    pub fn config_hash(&self) -> String {
        let mut orders = self.ngram_orders.clone();
        orders.sort_unstable();
        orders.dedup();
        let canonical = serde_json::json!({
            "ngram_orders": orders,
            "hash_buckets": self.hash_buckets,
            "hash_seed": self.hash_seed,
            "dimension": self.dimension,
            "metric": self.metric,
            "normalize": self.normalize,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded FNV-1a over the n-gram's tokens, finalized with a 64-bit mixer so
/// that low bits (bucket) and the top bit (sign) are independent.
fn hash_ngram(seed: u64, gram: &[String]) -> u64 {
    let mut h = FNV_OFFSET ^ mix64(seed);
    h = h.wrapping_mul(FNV_PRIME);
    for (i, tok) in gram.iter().enumerate() {
        if i > 0 {
            h ^= 0x1f;
            h = h.wrapping_mul(FNV_PRIME);
        }
        for b in tok.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h ^= gram.len() as u64;
    mix64(h)
}

/// Text plus its derived embedding and token set.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedText {
    pub embedding: EmbeddingVector,
    pub tokens: TokenSet,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    orders: Vec<usize>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut orders = cfg.ngram_orders.clone();
        orders.sort_unstable();
        orders.dedup();
        Ok(Encoder { cfg, orders })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    pub fn metric(&self) -> Metric {
        self.cfg.metric
    }

    pub fn embed(&self, text: &str) -> EmbeddingVector {
        self.embed_tokens(&tokenize(text))
    }

    pub fn embed_tokens(&self, tokens: &TokenSequence) -> EmbeddingVector {
        let d = self.cfg.dimension;
        let mut acc = vec![0.0f64; d];
        let toks = tokens.as_slice();
        for &n in &self.orders {
            if toks.len() < n {
                continue;
            }
            for gram in toks.windows(n) {
                let h = hash_ngram(self.cfg.hash_seed, gram);
                let bucket = h % self.cfg.hash_buckets;
                let dim = (bucket % d as u64) as usize;
                let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
                acc[dim] += sign;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return EmbeddingVector::zeros(d);
        }
        if self.cfg.normalize {
            EmbeddingVector {
                values: acc.iter().map(|v| (v / norm) as f32).collect(),
                norm_mode: NormMode::Unit,
            }
        } else {
            EmbeddingVector {
                values: acc.iter().map(|v| *v as f32).collect(),
                norm_mode: NormMode::Raw,
            }
        }
    }

    pub fn encode(&self, text: &str) -> EncodedText {
        let tokens = tokenize(text);
        EncodedText {
            embedding: self.embed_tokens(&tokens),
            tokens: tokens.to_set(),
        }
    }
}

fn check_dims(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Dot product accumulated in f64, in index order.
pub fn dot(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a, b)?;
    Ok(dot_f32(&a.values, &b.values))
}

pub(crate) fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc
}

/// Cosine from a precomputed dot product and norms; zero vectors score 0.
pub(crate) fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    if norm_a == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    let d = dot(a, b)?;
    Ok(cosine_from_parts(d, a.norm(), b.norm()))
}

/// Jaccard overlap; two empty sets score 0.
pub fn jaccard(a: &TokenSet, b: &TokenSet) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn similarity(a: &EncodedText, b: &EncodedText, metric: Metric) -> Result<f64> {
    check_dims(&a.embedding, &b.embedding)?;
    Ok(match metric {
        Metric::Cosine => cosine(&a.embedding, &b.embedding)?,
        Metric::Dot => dot(&a.embedding, &b.embedding)?,
        Metric::Lexical => jaccard(&a.tokens, &b.tokens),
    })
}

/// Vector-only similarity. Lexical needs token sets and is rejected here.
pub fn vector_similarity(a: &EmbeddingVector, b: &EmbeddingVector, metric: Metric) -> Result<f64> {
    match metric {
        Metric::Cosine => cosine(a, b),
        Metric::Dot => dot(a, b),
        Metric::Lexical => Err(Error::MissingTokens),
    }
}
