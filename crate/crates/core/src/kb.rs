//! Labeled exemplar store with an exact similarity index, thresholded top-K
//! and relaxed-band retrieval, and epoch-versioned snapshots.
//!
//! Writes go through a single-writer staging area; readers only ever see
//! published [`KbSnapshot`]s, which are immutable. Publishing swaps an
//! `Arc` pointer, so a reader holding an older snapshot keeps a consistent
//! view for as long as it wants.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use arc_swap::ArcSwap;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    cosine_from_parts, jaccard, l2_norm, EmbeddingVector, EncodedText, Encoder, EncoderConfig,
    Metric, TokenSet,
};
use crate::error::{Error, Result};
use crate::par::{map_ranges, ExecMode};
use crate::types::{Label, Source};

pub const KB_FORMAT: &str = "adrag-kb";
pub const KB_FORMAT_VERSION: u32 = 1;

/// Entries scored per parallel work unit.
const SCAN_CHUNK: usize = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub source: Source,
    /// Milliseconds since the Unix epoch.
    pub timestamp: i64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbEntry {
    pub id: u64,
    pub text: String,
    pub label: Label,
    pub embedding: EmbeddingVector,
    pub token_set: TokenSet,
    pub meta: EntryMeta,
}

impl KbEntry {
    pub fn encoded(&self) -> EncodedText {
        EncodedText {
            embedding: self.embedding.clone(),
            tokens: self.token_set.clone(),
        }
    }
}

/// Fields supplied by callers of [`KnowledgeBase::insert`].
#[derive(Debug, Clone, PartialEq)]
pub struct NewEntry {
    pub text: String,
    pub label: Label,
    pub source: Source,
    pub timestamp: Option<i64>,
    pub confidence: f64,
}

impl NewEntry {
    pub fn new(text: impl Into<String>, label: Label) -> Self {
        NewEntry {
            text: text.into(),
            label,
            source: Source::Seed,
            timestamp: None,
            confidence: 1.0,
        }
    }

    pub fn source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    pub fn timestamp(mut self, ts: i64) -> Self {
        self.timestamp = Some(ts);
        self
    }

    pub fn confidence(mut self, c: f64) -> Self {
        self.confidence = c;
        self
    }
}

pub fn now_millis() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextItem {
    pub entry_id: u64,
    pub score: f64,
}

/// Ordered retrieval result: score descending, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContextSet {
    pub items: Vec<ContextItem>,
    pub k_requested: usize,
}

fn rank_order(a: &ContextItem, b: &ContextItem) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.entry_id.cmp(&b.entry_id))
}

impl ContextSet {
    pub fn empty(k_requested: usize) -> Self {
        ContextSet {
            items: Vec::new(),
            k_requested,
        }
    }

    /// Sorts candidates into canonical order and keeps at most `k`.
    pub fn from_candidates(mut candidates: Vec<ContextItem>, k: usize) -> Self {
        candidates.sort_by(rank_order);
        candidates.truncate(k);
        ContextSet {
            items: candidates,
            k_requested: k,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.items.iter().map(|i| i.entry_id).collect()
    }
}

/// Resolves context entry ids into entries.
pub trait EntryResolver {
    fn resolve(&self, id: u64) -> Option<&KbEntry>;
}

/// Column-major embedding matrix with cached norms. Scoring touches only the
/// columns where the query is nonzero; results are bit-identical to a
/// row-wise dot product in index order.
#[derive(Debug, Clone, Default)]
struct FlatIndex {
    dim: usize,
    len: usize,
    columns: Vec<f32>,
    norms: Vec<f64>,
}

impl FlatIndex {
    fn build(dim: usize, entries: &[Arc<KbEntry>]) -> Self {
        let len = entries.len();
        let mut columns = vec![0.0f32; dim * len];
        let mut norms = Vec::with_capacity(len);
        for (i, e) in entries.iter().enumerate() {
            for (j, v) in e.embedding.values.iter().enumerate() {
                columns[j * len + i] = *v;
            }
            norms.push(l2_norm(&e.embedding.values));
        }
        FlatIndex {
            dim,
            len,
            columns,
            norms,
        }
    }

    fn dots(&self, query: &[f32], range: std::ops::Range<usize>, out: &mut Vec<f64>) {
        out.clear();
        out.resize(range.len(), 0.0);
        for (j, &q) in query.iter().enumerate().take(self.dim) {
            if q == 0.0 {
                continue;
            }
            let q = q as f64;
            let col = &self.columns[j * self.len + range.start..j * self.len + range.end];
            for (acc, c) in out.iter_mut().zip(col) {
                *acc += q * *c as f64;
            }
        }
    }
}

/// Inclusive score window used by both retrieval paths.
#[derive(Debug, Clone, Copy)]
struct ScoreWindow {
    lo: f64,
    hi: f64,
    limit: Option<usize>,
}

#[derive(Debug)]
pub struct KbSnapshot {
    epoch: u64,
    encoder: Arc<Encoder>,
    entries: Vec<Arc<KbEntry>>,
    positions: HashMap<u64, usize>,
    index: FlatIndex,
}

impl KbSnapshot {
    fn new(epoch: u64, encoder: Arc<Encoder>, entries: Vec<Arc<KbEntry>>) -> Self {
        let positions = entries.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
        let index = FlatIndex::build(encoder.dimension(), &entries);
        KbSnapshot {
            epoch,
            encoder,
            entries,
            positions,
            index,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn entries(&self) -> impl Iterator<Item = &KbEntry> {
        self.entries.iter().map(|e| e.as_ref())
    }

    pub fn get(&self, id: u64) -> Option<&KbEntry> {
        self.positions.get(&id).map(|&i| self.entries[i].as_ref())
    }

    pub fn contains(&self, id: u64) -> bool {
        self.positions.contains_key(&id)
    }

    /// Top-K entries with similarity ≥ 1 − ε under the KB's encoder and metric.
    pub fn retrieve_topk(&self, x: &str, k: usize, epsilon: f64) -> Result<ContextSet> {
        self.retrieve_topk_excluding(x, k, epsilon, &[])
    }

    pub fn retrieve_topk_excluding(
        &self,
        x: &str,
        k: usize,
        epsilon: f64,
        exclude: &[u64],
    ) -> Result<ContextSet> {
        let q = self.encoder.encode(x);
        self.retrieve_topk_encoded(&q, k, epsilon, exclude, ExecMode::default())
    }

    pub fn retrieve_topk_encoded(
        &self,
        query: &EncodedText,
        k: usize,
        epsilon: f64,
        exclude: &[u64],
        mode: ExecMode,
    ) -> Result<ContextSet> {
        check_unit("epsilon", epsilon)?;
        Ok(self.retrieve_min_score(query, k, 1.0 - epsilon, exclude, mode))
    }

    /// Top-K entries scoring at least `min_score`; no range check on the bound.
    pub fn retrieve_min_score(
        &self,
        query: &EncodedText,
        k: usize,
        min_score: f64,
        exclude: &[u64],
        mode: ExecMode,
    ) -> ContextSet {
        if k == 0 {
            return ContextSet::empty(0);
        }
        let window = ScoreWindow {
            lo: min_score,
            hi: f64::INFINITY,
            limit: Some(k),
        };
        let items = self.scan(query, window, exclude, mode);
        ContextSet {
            items,
            k_requested: k,
        }
    }

    /// Every entry with δ ≤ similarity ≤ 1 − ε, in canonical order.
    pub fn retrieve_relaxed(&self, x: &str, delta: f64, epsilon: f64) -> Result<ContextSet> {
        let q = self.encoder.encode(x);
        self.retrieve_relaxed_encoded(&q, delta, epsilon, &[], ExecMode::default())
    }

    pub fn retrieve_relaxed_encoded(
        &self,
        query: &EncodedText,
        delta: f64,
        epsilon: f64,
        exclude: &[u64],
        mode: ExecMode,
    ) -> Result<ContextSet> {
        check_unit("delta", delta)?;
        check_unit("epsilon", epsilon)?;
        if delta >= epsilon {
            return Err(Error::InvalidBand { delta, epsilon });
        }
        let window = ScoreWindow {
            lo: delta,
            hi: 1.0 - epsilon,
            limit: None,
        };
        let items = self.scan(query, window, exclude, mode);
        let n = items.len();
        Ok(ContextSet {
            items,
            k_requested: n,
        })
    }

    /// Similarity of `query` to the entry at position `pos`, exactly as the
    /// pairwise functions in the encoder module compute it.
    pub fn score_entry(&self, query: &EncodedText, id: u64) -> Option<f64> {
        let e = self.get(id)?;
        crate::encoder::similarity(query, &e.encoded(), self.encoder.metric()).ok()
    }

    fn scan(
        &self,
        query: &EncodedText,
        window: ScoreWindow,
        exclude: &[u64],
        mode: ExecMode,
    ) -> Vec<ContextItem> {
        let metric = self.encoder.metric();
        let qnorm = query.embedding.norm();
        let chunks = map_ranges(mode, self.entries.len(), SCAN_CHUNK, |range| {
            let mut buf = Vec::new();
            if metric != Metric::Lexical {
                self.index.dots(&query.embedding.values, range.clone(), &mut buf);
            }
            let mut hits = Vec::new();
            for (off, pos) in range.enumerate() {
                let score = match metric {
                    Metric::Cosine => cosine_from_parts(buf[off], qnorm, self.index.norms[pos]),
                    Metric::Dot => buf[off],
                    Metric::Lexical => jaccard(&query.tokens, &self.entries[pos].token_set),
                };
                if score >= window.lo && score <= window.hi {
                    let id = self.entries[pos].id;
                    if !exclude.contains(&id) {
                        hits.push(ContextItem {
                            entry_id: id,
                            score,
                        });
                    }
                }
            }
            hits.sort_by(rank_order);
            if let Some(k) = window.limit {
                hits.truncate(k);
            }
            hits
        });
        let mut all: Vec<ContextItem> = chunks.into_iter().flatten().collect();
        all.sort_by(rank_order);
        if let Some(k) = window.limit {
            all.truncate(k);
        }
        all
    }
}

impl EntryResolver for KbSnapshot {
    fn resolve(&self, id: u64) -> Option<&KbEntry> {
        self.get(id)
    }
}

/// A base resolver plus extra entries that never enter the index, such as
/// generated adversarial or text-perturbed contexts.
#[derive(Clone, Copy)]
pub struct Overlay<'a> {
    pub base: &'a dyn EntryResolver,
    pub extra: &'a HashMap<u64, KbEntry>,
}

impl EntryResolver for Overlay<'_> {
    fn resolve(&self, id: u64) -> Option<&KbEntry> {
        self.extra.get(&id).or_else(|| self.base.resolve(id))
    }
}

impl EntryResolver for HashMap<u64, KbEntry> {
    fn resolve(&self, id: u64) -> Option<&KbEntry> {
        self.get(&id)
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidRetrieval(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Default)]
struct Writer {
    next_id: u64,
    staged: Vec<Arc<KbEntry>>,
}

/// Knowledge base with a single-writer staging path and lock-free readers.
#[derive(Debug)]
pub struct KnowledgeBase {
    encoder: Arc<Encoder>,
    published: ArcSwap<KbSnapshot>,
    writer: Mutex<Writer>,
}

impl KnowledgeBase {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        let encoder = Arc::new(Encoder::new(cfg)?);
        Ok(Self::with_encoder(encoder))
    }

    pub fn with_encoder(encoder: Arc<Encoder>) -> Self {
        let empty = KbSnapshot::new(0, encoder.clone(), Vec::new());
        KnowledgeBase {
            encoder,
            published: ArcSwap::from_pointee(empty),
            writer: Mutex::new(Writer::default()),
        }
    }

    pub fn encoder(&self) -> &Arc<Encoder> {
        &self.encoder
    }

    /// Stages an entry; it becomes retrievable at the next publish.
    pub fn insert(&self, entry: NewEntry) -> Result<u64> {
        let mut w = self.writer.lock();
        let id = w.next_id;
        let e = self.make_entry(id, entry)?;
        w.next_id += 1;
        w.staged.push(Arc::new(e));
        Ok(id)
    }

    /// Stages a batch under one writer lock. Ids are consecutive.
    pub fn insert_many<I: IntoIterator<Item = NewEntry>>(&self, entries: I) -> Result<Vec<u64>> {
        let mut w = self.writer.lock();
        let mut ids = Vec::new();
        let mut staged = Vec::new();
        for (offset, entry) in entries.into_iter().enumerate() {
            let id = w.next_id + offset as u64;
            staged.push(Arc::new(self.make_entry(id, entry)?));
            ids.push(id);
        }
        w.next_id += ids.len() as u64;
        w.staged.extend(staged);
        Ok(ids)
    }

    fn make_entry(&self, id: u64, entry: NewEntry) -> Result<KbEntry> {
        if entry.text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let enc = self.encoder.encode(&entry.text);
        Ok(KbEntry {
            id,
            text: entry.text,
            label: entry.label,
            embedding: enc.embedding,
            token_set: enc.tokens,
            meta: EntryMeta {
                source: entry.source,
                timestamp: entry.timestamp.unwrap_or_else(now_millis),
                confidence: entry.confidence,
            },
        })
    }

    /// Looks up an entry whether published or still staged.
    pub fn lookup(&self, id: u64) -> Option<Arc<KbEntry>> {
        let snap = self.published.load();
        if let Some(&pos) = snap.positions.get(&id) {
            return Some(snap.entries[pos].clone());
        }
        let w = self.writer.lock();
        w.staged.iter().find(|e| e.id == id).cloned()
    }

    pub fn staged_len(&self) -> usize {
        self.writer.lock().staged.len()
    }

    /// Current published snapshot.
    pub fn snapshot(&self) -> Arc<KbSnapshot> {
        self.published.load_full()
    }

    pub fn epoch(&self) -> u64 {
        self.published.load().epoch
    }

    /// Folds staged entries into a new snapshot and swaps it in.
    pub fn publish_snapshot(&self) -> u64 {
        let mut w = self.writer.lock();
        let current = self.published.load_full();
        let mut entries = current.entries.clone();
        entries.append(&mut w.staged);
        let epoch = current.epoch + 1;
        let next = KbSnapshot::new(epoch, self.encoder.clone(), entries);
        self.published.store(Arc::new(next));
        epoch
    }

    pub fn retrieve_topk(&self, x: &str, k: usize, epsilon: f64) -> Result<ContextSet> {
        self.snapshot().retrieve_topk(x, k, epsilon)
    }

    pub fn retrieve_relaxed(&self, x: &str, delta: f64, epsilon: f64) -> Result<ContextSet> {
        self.snapshot().retrieve_relaxed(x, delta, epsilon)
    }

    /// Writes every entry, published and staged, to `path`.
    pub fn persist(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let w = self.writer.lock();
        let snap = self.published.load_full();
        let all: Vec<&Arc<KbEntry>> = snap.entries.iter().chain(w.staged.iter()).collect();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header = KbHeader {
            format: KB_FORMAT.to_string(),
            version: KB_FORMAT_VERSION,
            encoder_hash: self.encoder.config().config_hash(),
            count: all.len(),
        };
        let mut write_line = |line: String| -> Result<()> {
            out.write_all(line.as_bytes())
                .and_then(|_| out.write_all(b"\n"))
                .map_err(|e| Error::io(path, e))
        };
        write_line(serde_json::to_string(&header)?)?;
        for e in all {
            write_line(serde_json::to_string(&KbRecord::from(e.as_ref()))?)?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a KB file written by [`KnowledgeBase::persist`] and publishes it
    /// as epoch 1. Embeddings are recomputed from text.
    pub fn load(path: impl AsRef<Path>, cfg: EncoderConfig) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::KbHeader("missing header".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: KbHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::KbHeader(e.to_string()))?;
        if header.format != KB_FORMAT || header.version != KB_FORMAT_VERSION {
            return Err(Error::KbHeader(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let expected = cfg.config_hash();
        if header.encoder_hash != expected {
            return Err(Error::EncoderHashMismatch {
                found: header.encoder_hash,
                expected,
            });
        }
        let kb = KnowledgeBase::new(cfg)?;
        let mut staged = Vec::with_capacity(header.count);
        let mut seen = std::collections::HashSet::new();
        for (index, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::KbRecord {
                index,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            if index >= header.count {
                return Err(Error::KbRecord {
                    index,
                    reason: format!("more records than header count {}", header.count),
                });
            }
            let rec: KbRecord = serde_json::from_str(&line).map_err(|e| Error::KbRecord {
                index,
                reason: e.to_string(),
            })?;
            if !seen.insert(rec.id) {
                return Err(Error::KbRecord {
                    index,
                    reason: format!("duplicate id {}", rec.id),
                });
            }
            let id = rec.id;
            let entry = kb
                .make_entry(
                    id,
                    NewEntry {
                        text: rec.text,
                        label: rec.label,
                        source: rec.source,
                        timestamp: Some(rec.timestamp),
                        confidence: rec.confidence,
                    },
                )
                .map_err(|e| Error::KbRecord {
                    index,
                    reason: e.to_string(),
                })?;
            staged.push(Arc::new(entry));
        }
        if staged.len() != header.count {
            return Err(Error::KbRecord {
                index: staged.len(),
                reason: format!(
                    "truncated: header declares {} records, found {}",
                    header.count,
                    staged.len()
                ),
            });
        }
        {
            let mut w = kb.writer.lock();
            w.next_id = staged.iter().map(|e| e.id + 1).max().unwrap_or(0);
            w.staged = staged;
        }
        kb.publish_snapshot();
        Ok(kb)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct KbHeader {
    format: String,
    version: u32,
    encoder_hash: String,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct KbRecord {
    id: u64,
    text: String,
    label: Label,
    source: Source,
    timestamp: i64,
    confidence: f64,
}

impl From<&KbEntry> for KbRecord {
    fn from(e: &KbEntry) -> Self {
        KbRecord {
            id: e.id,
            text: e.text.clone(),
            label: e.label,
            source: e.meta.source,
            timestamp: e.meta.timestamp,
            confidence: e.meta.confidence,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::similarity;

    fn kb_with(texts: &[(&str, Label)]) -> KnowledgeBase {
        let kb = KnowledgeBase::new(EncoderConfig::default()).unwrap();
        for (t, l) in texts {
            kb.insert(NewEntry::new(*t, *l).timestamp(1)).unwrap();
        }
        kb.publish_snapshot();
        kb
    }

    #[test]
    fn insert_lookup_and_ids() {
        let kb = KnowledgeBase::new(EncoderConfig::default()).unwrap();
        let a = kb.insert(NewEntry::new("free offer", Label::Safe)).unwrap();
        let b = kb.insert(NewEntry::new("free offer", Label::Safe)).unwrap();
        assert_ne!(a, b);
        let e = kb.lookup(a).unwrap();
        assert_eq!(e.text, "free offer");
        assert_eq!(e.meta.source, Source::Seed);
        assert!(matches!(
            kb.insert(NewEntry::new("  ", Label::Safe)),
            Err(Error::EmptyText)
        ));
    }

    #[test]
    fn empty_kb_returns_nothing() {
        let kb = KnowledgeBase::new(EncoderConfig::default()).unwrap();
        assert!(kb.retrieve_topk("anything", 5, 1.0).unwrap().is_empty());
    }

    #[test]
    fn self_match_ranks_first() {
        let kb = kb_with(&[
            ("how do i bake bread", Label::Safe),
            ("how do i pick a lock", Label::Unsafe),
            ("best bread recipes", Label::Safe),
        ]);
        let ctx = kb.retrieve_topk("how do i pick a lock", 3, 0.1).unwrap();
        assert_eq!(ctx.items[0].entry_id, 1);
        assert!((ctx.items[0].score - 1.0).abs() < 1e-12);
        let ctx = kb
            .snapshot()
            .retrieve_topk_excluding("how do i pick a lock", 3, 0.1, &[1])
            .unwrap();
        assert!(ctx.ids().iter().all(|&id| id != 1));
    }

    #[test]
    fn relaxed_band_validation_and_degenerate_band() {
        let kb = kb_with(&[("alpha beta", Label::Safe), ("gamma delta", Label::Unsafe)]);
        assert!(matches!(
            kb.retrieve_relaxed("alpha", 0.5, 0.5),
            Err(Error::InvalidBand { .. })
        ));
        assert!(kb.retrieve_relaxed("alpha", 0.6, 0.5).is_err());
        // [0, 0] keeps only exact zeros.
        let snap = kb.snapshot();
        let q = snap.encoder().encode("alpha beta");
        let band = snap
            .retrieve_relaxed_encoded(&q, 0.0, 1.0, &[], ExecMode::Sequential)
            .unwrap();
        for item in &band.items {
            assert_eq!(item.score, 0.0);
        }
    }

    #[test]
    fn publish_is_monotone_and_snapshots_are_immutable() {
        let kb = KnowledgeBase::new(EncoderConfig::default()).unwrap();
        let e1 = kb.publish_snapshot();
        let e2 = kb.publish_snapshot();
        assert_eq!(e2, e1 + 1);
        let old = kb.snapshot();
        let id = kb.insert(NewEntry::new("new thing", Label::Unsafe)).unwrap();
        assert!(kb.retrieve_topk("new thing", 1, 0.1).unwrap().is_empty());
        kb.publish_snapshot();
        assert!(!old.contains(id));
        assert_eq!(old.len(), 0);
        assert_eq!(kb.retrieve_topk("new thing", 1, 0.1).unwrap().ids(), vec![id]);
    }

    #[test]
    fn modes_match_bruteforce() {
        let texts: Vec<String> = (0..200)
            .map(|i| format!("w{} w{} w{} shared", i % 7, i % 11, i % 13))
            .collect();
        let kb = KnowledgeBase::new(EncoderConfig::default()).unwrap();
        for (i, t) in texts.iter().enumerate() {
            kb.insert(NewEntry::new(t.clone(), Label::from_index(i % 2)).timestamp(0))
                .unwrap();
        }
        kb.publish_snapshot();
        let snap = kb.snapshot();
        let q = snap.encoder().encode("w1 w2 w3 shared");
        let mut brute: Vec<ContextItem> = snap
            .entries()
            .map(|e| ContextItem {
                entry_id: e.id,
                score: similarity(&q, &e.encoded(), Metric::Cosine).unwrap(),
            })
            .filter(|c| c.score >= 0.3)
            .collect();
        brute.sort_by(rank_order);
        brute.truncate(10);
        for mode in [ExecMode::Sequential, ExecMode::Parallel] {
            let got = snap.retrieve_topk_encoded(&q, 10, 0.7, &[], mode).unwrap();
            assert_eq!(got.items, brute);
        }
    }

    #[test]
    fn persist_load_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let kb = kb_with(&[("one fish", Label::Safe), ("two fish", Label::Unsafe)]);
        kb.insert(NewEntry::new("red fish", Label::Safe).confidence(0.3).timestamp(7))
            .unwrap();
        kb.persist(&path).unwrap();
        let loaded = KnowledgeBase::load(&path, EncoderConfig::default()).unwrap();
        for id in 0..3 {
            assert_eq!(*loaded.lookup(id).unwrap(), *kb.lookup(id).unwrap());
        }
        let next = loaded.insert(NewEntry::new("blue fish", Label::Safe)).unwrap();
        assert_eq!(next, 3);

        let other = EncoderConfig {
            hash_seed: 99,
            ..EncoderConfig::default()
        };
        assert!(matches!(
            KnowledgeBase::load(&path, other),
            Err(Error::EncoderHashMismatch { .. })
        ));

        let content = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = content.lines().collect();
        let truncated = dir.path().join("trunc.jsonl");
        std::fs::write(&truncated, lines[..3].join("\n")).unwrap();
        match KnowledgeBase::load(&truncated, EncoderConfig::default()) {
            Err(Error::KbRecord { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected record error, got {other:?}"),
        }
        let cut = dir.path().join("cut.jsonl");
        let mut partial = lines[..2].join("\n");
        partial.push('\n');
        partial.push_str(&lines[2][..10]);
        std::fs::write(&cut, partial).unwrap();
        match KnowledgeBase::load(&cut, EncoderConfig::default()) {
            Err(Error::KbRecord { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected record error, got {other:?}"),
        }
    }
}
