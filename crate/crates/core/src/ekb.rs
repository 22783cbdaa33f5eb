//! The evolving knowledge base: labelled feedback gated by a unanimity and
//! count rule, policy-guided synthetic examples, and snapshot refresh.
//!
//! Promotions and synthetic entries are staged on the KB's single writer and
//! become visible to readers only when [`refresh`] publishes a new snapshot.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{now_millis, KnowledgeBase, NewEntry};
use crate::types::{sha256_hex, Label, Source};

pub const DEFAULT_MIN_LABELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    EndUser,
    Operator,
    GraderModel,
}

impl std::str::FromStr for FeedbackSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "end_user" => Ok(FeedbackSource::EndUser),
            "operator" => Ok(FeedbackSource::Operator),
            "grader_model" => Ok(FeedbackSource::GraderModel),
            other => Err(Error::InvalidConfig(format!("unknown feedback source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEvent {
    pub label: Label,
    pub source: FeedbackSource,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordStatus {
    Pending,
    Accepted,
    Rejected,
}

impl RecordStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordStatus::Pending => "pending",
            RecordStatus::Accepted => "accepted",
            RecordStatus::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub key: String,
    /// Text as first submitted; this is what a promotion inserts.
    pub query_text: String,
    pub labels: Vec<LabelEvent>,
    pub status: RecordStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_id: Option<u64>,
}

impl FeedbackRecord {
    pub fn label_values(&self) -> Vec<Label> {
        self.labels.iter().map(|e| e.label).collect()
    }

    pub fn is_confident(&self, k: usize) -> bool {
        confidence(&self.label_values(), k)
    }

    /// The unanimous label, if any.
    pub fn consensus(&self) -> Option<Label> {
        let first = self.labels.first()?.label;
        self.labels.iter().all(|e| e.label == first).then_some(first)
    }

    /// Further consistent labels needed before the record can be promoted;
    /// `None` once labels disagree.
    pub fn labels_needed(&self, k: usize) -> Option<usize> {
        if self.labels.is_empty() {
            return Some(k);
        }
        self.consensus().map(|_| k.saturating_sub(self.labels.len()))
    }
}

/// Lowercased, whitespace-collapsed query text.
pub fn normalize_query(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// True iff there are at least `k` labels and all of them agree.
pub fn confidence(labels: &[Label], k: usize) -> bool {
    match labels.first() {
        None => false,
        Some(first) => labels.len() >= k && labels.iter().all(|l| l == first),
    }
}

/// Feedback records keyed by normalized query text. Each record is updated
/// under its own lock; the map lock is held only to find or create it.
#[derive(Debug)]
pub struct FeedbackStore {
    k: usize,
    records: RwLock<HashMap<String, Arc<Mutex<FeedbackRecord>>>>,
    log: Option<(PathBuf, Mutex<BufWriter<File>>)>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    query_hash: &'a str,
    label: Label,
    source: FeedbackSource,
    timestamp: i64,
}

impl FeedbackStore {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("confidence threshold k must be ≥ 1".into()));
        }
        Ok(FeedbackStore {
            k,
            records: RwLock::new(HashMap::new()),
            log: None,
        })
    }

    /// Also appends every label event to a JSONL log at `path`.
    pub fn with_log(k: usize, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut store = Self::new(k)?;
        store.log = Some((path, Mutex::new(BufWriter::new(file))));
        Ok(store)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn slot(&self, key: &str) -> Option<Arc<Mutex<FeedbackRecord>>> {
        self.records.read().get(key).cloned()
    }

    pub fn submit(&self, query_text: &str, label: Label, source: FeedbackSource) -> Result<FeedbackRecord> {
        self.submit_at(query_text, label, source, now_millis())
    }

    pub fn submit_at(&self, query_text: &str, label: Label, source: FeedbackSource, timestamp: i64) -> Result<FeedbackRecord> {
        let key = normalize_query(query_text);
        if key.is_empty() {
            return Err(Error::EmptyText);
        }
        let slot = match self.slot(&key) {
            Some(s) => s,
            None => self
                .records
                .write()
                .entry(key.clone())
                .or_insert_with(|| {
                    Arc::new(Mutex::new(FeedbackRecord {
                        key: key.clone(),
                        query_text: query_text.trim().to_string(),
                        labels: Vec::new(),
                        status: RecordStatus::Pending,
                        entry_id: None,
                    }))
                })
                .clone(),
        };
        let mut rec = slot.lock();
        let event = LabelEvent {
            label,
            source,
            timestamp,
        };
        if let Some((path, log)) = &self.log {
            let line = serde_json::to_string(&LogLine {
                query_hash: &sha256_hex(key.as_bytes()),
                label,
                source,
                timestamp,
            })?;
            let mut w = log.lock();
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
        }
        rec.labels.push(event);
        Ok(rec.clone())
    }

    pub fn get(&self, query_text: &str) -> Option<FeedbackRecord> {
        self.slot(&normalize_query(query_text)).map(|s| s.lock().clone())
    }

    /// All records, sorted by key; optionally only those with `status`.
    pub fn list(&self, status: Option<RecordStatus>) -> Vec<FeedbackRecord> {
        let slots: Vec<_> = self.records.read().values().cloned().collect();
        let mut out: Vec<FeedbackRecord> = slots
            .iter()
            .map(|s| s.lock().clone())
            .filter(|r| status.map_or(true, |st| r.status == st))
            .collect();
        out.sort_by(|a, b| a.key.cmp(&b.key));
        out
    }

    /// Stages the record's text as a feedback entry and marks it accepted.
    /// The entry is retrievable after the next [`refresh`].
    pub fn promote(&self, query_text: &str, kb: &KnowledgeBase) -> Result<(u64, FeedbackRecord)> {
        let key = normalize_query(query_text);
        let slot = self.slot(&key).ok_or_else(|| Error::UnknownRecord(key.clone()))?;
        let mut rec = slot.lock();
        if rec.status != RecordStatus::Pending {
            return Err(Error::RecordClosed {
                key,
                status: rec.status.as_str().into(),
            });
        }
        let label = match rec.consensus() {
            Some(l) if rec.is_confident(self.k) => l,
            _ => {
                return Err(Error::NotConfident(format!(
                    "{key}: {} labels, k = {}",
                    rec.labels.len(),
                    self.k
                )))
            }
        };
        let n = rec.labels.len() as f64;
        let id = kb.insert(
            NewEntry::new(rec.query_text.clone(), label)
                .source(Source::Feedback)
                .confidence(n / (n + self.k as f64)),
        )?;
        rec.status = RecordStatus::Accepted;
        rec.entry_id = Some(id);
        Ok((id, rec.clone()))
    }

    /// Operator rejection. Only pending records can be rejected.
    pub fn reject(&self, query_text: &str) -> Result<FeedbackRecord> {
        let key = normalize_query(query_text);
        let slot = self.slot(&key).ok_or_else(|| Error::UnknownRecord(key.clone()))?;
        let mut rec = slot.lock();
        if rec.status != RecordStatus::Pending {
            return Err(Error::RecordClosed {
                key,
                status: rec.status.as_str().into(),
            });
        }
        rec.status = RecordStatus::Rejected;
        Ok(rec.clone())
    }

    /// Every feedback-sourced entry in `kb` must come from an accepted record.
    pub fn audit(&self, kb: &KnowledgeBase) -> std::result::Result<(), String> {
        let accepted: HashMap<u64, String> = self
            .list(Some(RecordStatus::Accepted))
            .into_iter()
            .filter_map(|r| r.entry_id.map(|id| (id, r.key)))
            .collect();
        for e in kb.snapshot().entries() {
            if e.meta.source == Source::Feedback && !accepted.contains_key(&e.id) {
                return Err(format!("entry {} has source feedback but no accepted record", e.id));
            }
        }
        Ok(())
    }
}

/// Publishes everything staged since the last refresh; returns the new epoch.
pub fn refresh(kb: &KnowledgeBase) -> u64 {
    kb.publish_snapshot()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub policy_id: String,
    pub target_label: Label,
    pub prompt_text: String,
    #[serde(default)]
    pub few_shot_examples: Vec<String>,
}

impl PolicySpec {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_text.trim().is_empty() {
            return Err(Error::Generator {
                policy_id: self.policy_id.clone(),
                reason: "prompt_text is empty".into(),
            });
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let spec: PolicySpec = serde_json::from_slice(&bytes)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Produces candidate texts for a policy. An LLM-backed generator plugs in here.
pub trait GeneratorInterface: Send + Sync {
    fn generate(&self, policy: &PolicySpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<String>>;
}

/// Slot-fills phrases of the policy prompt with fragments of its few-shot
/// examples, or with words of the prompt itself when there are none.
#[derive(Debug, Clone, Default)]
pub struct TemplateGenerator;

fn phrases(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| matches!(c, '.' | ';' | ',' | '\n' | ':'))
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fragment(text: &str, rng: &mut ChaCha8Rng) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= 3 {
        return words.join(" ");
    }
    let len = rng.gen_range(3..=words.len().min(6));
    let start = rng.gen_range(0..=words.len() - len);
    words[start..start + len].join(" ")
}

const CONNECTORS: &[&str] = &["such as", "like", "for example", "including", "e.g."];

impl GeneratorInterface for TemplateGenerator {
    fn generate(&self, policy: &PolicySpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
        let ps = phrases(&policy.prompt_text);
        if ps.is_empty() {
            return Err(Error::Generator {
                policy_id: policy.policy_id.clone(),
                reason: "prompt has no usable phrases".into(),
            });
        }
        let prompt_words: Vec<&str> = policy.prompt_text.split_whitespace().collect();
        Ok((0..n)
            .map(|_| {
                let phrase = ps.choose(rng).expect("phrases");
                let filler = match policy.few_shot_examples.choose(rng) {
                    Some(ex) => fragment(ex, rng),
                    None => {
                        let k = rng.gen_range(1..=prompt_words.len().min(4));
                        prompt_words.choose_multiple(rng, k).copied().collect::<Vec<_>>().join(" ")
                    }
                };
                let conn = CONNECTORS.choose(rng).expect("connectors");
                format!("{phrase} {conn} {}", filler.to_lowercase())
            })
            .collect())
    }
}

/// `n` texts from `generator`, each labelled with the policy's target label.
pub fn synth_generate(
    policy: &PolicySpec,
    generator: &dyn GeneratorInterface,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(String, Label)>> {
    let fail = |reason: String| Error::Generator {
        policy_id: policy.policy_id.clone(),
        reason,
    };
    if n == 0 {
        return Err(fail("n must be ≥ 1".into()));
    }
    policy.validate()?;
    let texts = generator.generate(policy, n, rng).map_err(|e| match e {
        Error::Generator { .. } => e,
        other => fail(other.to_string()),
    })?;
    if texts.len() != n {
        return Err(fail(format!("generator returned {} texts, expected {n}", texts.len())));
    }
    if texts.iter().any(|t| t.trim().is_empty()) {
        return Err(fail("generator returned an empty text".into()));
    }
    Ok(texts.into_iter().map(|t| (t, policy.target_label)).collect())
}

/// Stages generated pairs as synthetic entries.
pub fn stage_synthetic(kb: &KnowledgeBase, pairs: &[(String, Label)]) -> Result<Vec<u64>> {
    kb.insert_many(
        pairs
            .iter()
            .map(|(t, l)| NewEntry::new(t.clone(), *l).source(Source::Synthetic)),
    )
}
