//! Context perturbation for adversarial contextual training.
//!
//! Four independent steps each yield perturbed context sets for a query:
//! adversarial variants of the retrieved entries, retrieval under an
//! alternative encoder or similarity, relaxed-threshold retrieval, and
//! surface-level text noise on the query and its contexts. Every step draws
//! from an explicit seeded stream, so materialized perturbations are
//! reproducible.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    cosine_from_parts, dot_f32, jaccard, tokenize, EmbeddingVector, EncodedText, Encoder,
    EncoderConfig, Metric,
};
use crate::error::{Error, Result};
use crate::guard::PredictionDistribution;
use crate::kb::{ContextItem, ContextSet, EntryMeta, KbEntry, KbSnapshot};
use crate::par::ExecMode;
use crate::types::{Label, Source};

/// Ids at or above this value belong to generated entries that live only in
/// a perturbation overlay, never in the index.
pub const GENERATED_ID_BASE: u64 = 1 << 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationSteps {
    pub adversarial_kb: bool,
    pub encoder_variation: bool,
    pub threshold_relaxing: bool,
    pub sampling: bool,
}

impl Default for PerturbationSteps {
    fn default() -> Self {
        PerturbationSteps {
            adversarial_kb: true,
            encoder_variation: true,
            threshold_relaxing: true,
            sampling: true,
        }
    }
}

impl PerturbationSteps {
    pub fn none() -> Self {
        PerturbationSteps {
            adversarial_kb: false,
            encoder_variation: false,
            threshold_relaxing: false,
            sampling: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    /// Weight of the adversarial loss.
    pub lambda: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub char_edit_rate: f64,
    pub word_swap_rate: f64,
    pub encoder_variants: Vec<EncoderConfig>,
    /// Similarity floor for encoder-variant retrieval is `1 − variant_epsilon`.
    pub variant_epsilon: f64,
    pub variants_per_context: usize,
    pub steps: PerturbationSteps,
    pub rng_seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        let base = EncoderConfig::default();
        PerturbationConfig {
            lambda: 0.5,
            delta: 0.2,
            epsilon: 0.4,
            char_edit_rate: 0.05,
            word_swap_rate: 0.05,
            encoder_variants: vec![
                EncoderConfig {
                    metric: Metric::Lexical,
                    ..base.clone()
                },
                EncoderConfig {
                    metric: Metric::Dot,
                    normalize: false,
                    ..base.clone()
                },
                EncoderConfig {
                    ngram_orders: vec![1],
                    hash_seed: base.hash_seed ^ 0x9e37_79b9,
                    ..base
                },
            ],
            variant_epsilon: 1.0,
            variants_per_context: 1,
            steps: PerturbationSteps::default(),
            rng_seed: 17,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be ≥ 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.delta) || !(0.0..=1.0).contains(&self.epsilon) {
            return bad("delta and epsilon must lie in [0, 1]".into());
        }
        if self.delta >= self.epsilon {
            return bad(format!(
                "delta {} must be < epsilon {}",
                self.delta, self.epsilon
            ));
        }
        for (name, r) in [
            ("char_edit_rate", self.char_edit_rate),
            ("word_swap_rate", self.word_swap_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        if !(0.0..=1.0).contains(&self.variant_epsilon) {
            return bad("variant_epsilon must lie in [0, 1]".into());
        }
        if self.steps.encoder_variation && self.encoder_variants.is_empty() {
            return bad("encoder variation enabled without encoder variants".into());
        }
        for v in &self.encoder_variants {
            v.validate()?;
        }
        if self.steps.adversarial_kb && self.variants_per_context == 0 {
            return bad("variants_per_context must be ≥ 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    LabelContradiction,
    AmbiguityInjection,
    LexicalOverlap,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::LabelContradiction,
        Strategy::AmbiguityInjection,
        Strategy::LexicalOverlap,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversarialEntry {
    pub derived_from: u64,
    pub text: String,
    pub intended_label: Label,
    pub strategy: Strategy,
}

/// Produces adversarial variants of a knowledge-base entry.
pub trait Attacker: Send + Sync {
    fn generate(&self, entry: &KbEntry, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<AdversarialEntry>>;
}

pub fn generate_adversarial_entries(
    entry: &KbEntry,
    attacker: &dyn Attacker,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AdversarialEntry>> {
    if n == 0 {
        return Err(Error::Attacker {
            entry_id: entry.id,
            reason: "n must be ≥ 1".into(),
        });
    }
    attacker.generate(entry, n, rng).map_err(|e| match e {
        Error::Attacker { .. } => e,
        other => Error::Attacker {
            entry_id: entry.id,
            reason: other.to_string(),
        },
    })
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "to", "of", "and", "or", "in", "on", "for", "is", "it", "i", "me", "my",
    "you", "your", "how", "what", "can", "do", "with", "about", "please", "tell", "be", "are",
];

// Short frames, so a variant stays close to its source in embedding space
// and differs mainly in the intent it signals.
const UNSAFE_TEMPLATES: &[&str] = &[
    "secretly {}",
    "{} to hurt someone",
    "{} without getting caught",
    "weaponize {}",
    "{} to harm them",
    "exploit {}",
];

const SAFE_TEMPLATES: &[&str] = &[
    "{} for a school project",
    "harmless {}",
    "history of {}",
    "{} safely",
    "learn about {}",
    "{} trivia",
];

const HEDGES: &[&str] = &["maybe", "not really", "kind of", "hypothetically", "i am not sure"];

/// Template-based attacker. Each draw picks one strategy uniformly.
#[derive(Debug, Clone, Default)]
pub struct RuleBasedAttacker;

fn salient_tokens(text: &str) -> Vec<String> {
    let toks = tokenize(text).0;
    let salient: Vec<String> = toks
        .iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .cloned()
        .collect();
    if salient.is_empty() {
        toks
    } else {
        salient
    }
}

fn templates_for(label: Label) -> &'static [&'static str] {
    match label {
        Label::Safe => SAFE_TEMPLATES,
        Label::Unsafe => UNSAFE_TEMPLATES,
    }
}

impl RuleBasedAttacker {
    pub fn variant(&self, entry: &KbEntry, strategy: Strategy, rng: &mut ChaCha8Rng) -> AdversarialEntry {
        let (text, intended_label) = self.variant_text(&entry.text, entry.label, strategy, rng);
        AdversarialEntry {
            derived_from: entry.id,
            text,
            intended_label,
            strategy,
        }
    }

    /// The variant text and its intended label for a labelled text.
    pub fn variant_text(&self, source: &str, label: Label, strategy: Strategy, rng: &mut ChaCha8Rng) -> (String, Label) {
        let salient = salient_tokens(source);
        let opposite = label.flip();
        match strategy {
            Strategy::LabelContradiction => {
                let tpl = templates_for(opposite).choose(rng).expect("templates");
                (tpl.replace("{}", &salient.join(" ")), opposite)
            }
            Strategy::AmbiguityInjection => {
                let mut words = salient.clone();
                let hedge = HEDGES.choose(rng).expect("hedges");
                let at = rng.gen_range(0..words.len().max(1));
                if words.is_empty() {
                    words.push(hedge.to_string());
                } else {
                    words.insert(at, "not".to_string());
                }
                (format!("{hedge} {}", words.join(" ")), label)
            }
            Strategy::LexicalOverlap => {
                let mut toks: Vec<String> = Vec::new();
                for t in tokenize(source).0 {
                    if !toks.contains(&t) {
                        toks.push(t);
                    }
                }
                let keep = toks.len().div_ceil(2).max(1).min(toks.len());
                let mut idx: Vec<usize> = (0..toks.len()).choose_multiple(rng, keep);
                idx.sort_unstable();
                let kept: Vec<&str> = idx.iter().map(|&i| toks[i].as_str()).collect();
                let tpl = templates_for(opposite).choose(rng).expect("templates");
                (tpl.replace("{}", &kept.join(" ")), opposite)
            }
        }
    }
}

impl Attacker for RuleBasedAttacker {
    fn generate(&self, entry: &KbEntry, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<AdversarialEntry>> {
        if entry.text.trim().is_empty() {
            return Err(Error::Attacker {
                entry_id: entry.id,
                reason: "entry has no text".into(),
            });
        }
        Ok((0..n)
            .map(|_| {
                let s = *Strategy::ALL.choose(rng).expect("strategies");
                self.variant(entry, s, rng)
            })
            .collect())
    }
}

/// Reward for an attack that produced `y_hat` on an input whose true label
/// is `y_star`: `1[y_hat ≠ y_star] · (1 − s[y_star])`.
pub fn attack_reward(guard_dist: &PredictionDistribution, y_star: Label, y_hat: Label) -> f64 {
    if y_hat == y_star {
        0.0
    } else {
        1.0 - guard_dist.prob(y_star)
    }
}

/// One alternative encoder/similarity with the KB re-embedded under it.
#[derive(Debug)]
struct VariantIndex {
    encoder: Encoder,
    embeddings: Vec<EmbeddingVector>,
    norms: Vec<f64>,
}

/// Retrieval over a snapshot under alternative encoders and similarity
/// functions. Entry order and ids follow the snapshot.
#[derive(Debug)]
pub struct VariantRetriever {
    variants: Vec<VariantIndex>,
    ids: Vec<u64>,
    tokens: Vec<crate::encoder::TokenSet>,
}

impl VariantRetriever {
    pub fn build(snapshot: &KbSnapshot, configs: &[EncoderConfig]) -> Result<Self> {
        let entries: Vec<&KbEntry> = snapshot.entries().collect();
        let mut variants = Vec::with_capacity(configs.len());
        for cfg in configs {
            let encoder = Encoder::new(cfg.clone())?;
            let embeddings: Vec<EmbeddingVector> = if cfg.metric == Metric::Lexical {
                Vec::new()
            } else {
                entries.iter().map(|e| encoder.embed(&e.text)).collect()
            };
            let norms = embeddings.iter().map(|e| e.norm()).collect();
            variants.push(VariantIndex {
                encoder,
                embeddings,
                norms,
            });
        }
        Ok(VariantRetriever {
            variants,
            ids: entries.iter().map(|e| e.id).collect(),
            tokens: entries.iter().map(|e| e.token_set.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }

    pub fn config(&self, variant: usize) -> &EncoderConfig {
        self.variants[variant].encoder.config()
    }

    /// Top-K under variant `variant` with similarity ≥ 1 − ε.
    pub fn retrieve(&self, variant: usize, x: &str, k: usize, epsilon: f64, exclude: &[u64]) -> ContextSet {
        let v = &self.variants[variant];
        let q = v.encoder.encode(x);
        let qnorm = q.embedding.norm();
        let floor = 1.0 - epsilon;
        let mut hits = Vec::new();
        for (pos, &id) in self.ids.iter().enumerate() {
            if exclude.contains(&id) {
                continue;
            }
            let score = match v.encoder.metric() {
                Metric::Lexical => jaccard(&q.tokens, &self.tokens[pos]),
                Metric::Dot => dot_f32(&q.embedding.values, &v.embeddings[pos].values),
                Metric::Cosine => cosine_from_parts(
                    dot_f32(&q.embedding.values, &v.embeddings[pos].values),
                    qnorm,
                    v.norms[pos],
                ),
            };
            if score >= floor {
                hits.push(ContextItem {
                    entry_id: id,
                    score,
                });
            }
        }
        ContextSet::from_candidates(hits, k)
    }
}

/// Retrieval under one uniformly drawn encoder/similarity variant.
pub fn perturb_retrieval(
    x: &str,
    variants: &VariantRetriever,
    k: usize,
    epsilon: f64,
    exclude: &[u64],
    rng: &mut ChaCha8Rng,
) -> Result<(usize, ContextSet)> {
    if variants.is_empty() {
        return Err(Error::InvalidConfig("no encoder variants".into()));
    }
    let v = rng.gen_range(0..variants.len());
    Ok((v, variants.retrieve(v, x, k, epsilon, exclude)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextNoise {
    pub char_edit_rate: f64,
    pub word_swap_rate: f64,
}

/// Most tokens [`perturb_text`] may alter for a text of `n` tokens.
pub fn edit_budget(noise: TextNoise, n: usize) -> usize {
    ((noise.char_edit_rate + noise.word_swap_rate) * n as f64).ceil() as usize + 1
}

fn edit_chars(word: &str, rng: &mut ChaCha8Rng) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    if chars.len() < 2 {
        let c = chars[0];
        chars.push(c);
        return chars.into_iter().collect();
    }
    match rng.gen_range(0..3) {
        0 => {
            let i = rng.gen_range(0..chars.len() - 1);
            if chars[i] == chars[i + 1] {
                chars.remove(i);
            } else {
                chars.swap(i, i + 1);
            }
        }
        1 => {
            let i = rng.gen_range(0..chars.len());
            chars.remove(i);
        }
        _ => {
            let i = rng.gen_range(0..chars.len());
            let c = chars[i];
            chars.insert(i, c);
        }
    }
    chars.into_iter().collect()
}

/// Character edits and adjacent word swaps on whitespace-separated words.
/// At most [`edit_budget`] word positions change.
pub fn perturb_text(text: &str, noise: TextNoise, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    if words.is_empty() {
        return text.to_string();
    }
    let budget = edit_budget(noise, words.len());
    let mut touched = vec![false; words.len()];
    let mut used = 0;
    for i in 0..words.len() {
        if rng.gen_bool(noise.char_edit_rate) && used < budget {
            words[i] = edit_chars(&words[i], rng);
            touched[i] = true;
            used += 1;
        }
    }
    let mut i = 0;
    while i + 1 < words.len() {
        if rng.gen_bool(noise.word_swap_rate) {
            let extra = usize::from(!touched[i]) + usize::from(!touched[i + 1]);
            if used + extra <= budget && words[i] != words[i + 1] {
                words.swap(i, i + 1);
                touched[i] = true;
                touched[i + 1] = true;
                used += extra;
                i += 2;
                continue;
            }
        }
        i += 1;
    }
    words.join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    AdversarialKb,
    EncoderVariation,
    ThresholdRelaxing,
    Sampling,
}

/// One perturbed context set with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedContext {
    pub step: Step,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<usize>,
    /// Replacement query text when the query itself was perturbed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    pub context: ContextSet,
}

/// Entries generated during perturbation, keyed by id.
#[derive(Debug, Default, Clone)]
pub struct GeneratedEntries {
    next_id: u64,
    pub entries: HashMap<u64, KbEntry>,
    pub provenance: HashMap<u64, (u64, Option<Strategy>)>,
}

impl GeneratedEntries {
    pub fn new() -> Self {
        GeneratedEntries {
            next_id: GENERATED_ID_BASE,
            ..Default::default()
        }
    }

    pub fn add(
        &mut self,
        encoder: &Encoder,
        text: String,
        label: Label,
        derived_from: u64,
        strategy: Option<Strategy>,
    ) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        let enc = encoder.encode(&text);
        self.entries.insert(
            id,
            KbEntry {
                id,
                text,
                label,
                embedding: enc.embedding,
                token_set: enc.tokens,
                meta: EntryMeta {
                    source: Source::Adversarial,
                    timestamp: 0,
                    confidence: 0.0,
                },
            },
        );
        self.provenance.insert(id, (derived_from, strategy));
        id
    }

    /// Moves entries from `other`, which must use a disjoint id range.
    pub fn merge(&mut self, other: GeneratedEntries) {
        self.next_id = self.next_id.max(other.next_id);
        self.entries.extend(other.entries);
        self.provenance.extend(other.provenance);
    }

    /// Starts a store whose ids begin at `base`.
    pub fn with_base(base: u64) -> Self {
        GeneratedEntries {
            next_id: base,
            ..Default::default()
        }
    }
}

/// Everything the perturbation pipeline needs for one knowledge base.
pub struct PerturbationContext<'a> {
    pub snapshot: &'a KbSnapshot,
    pub variants: &'a VariantRetriever,
    pub attacker: &'a dyn Attacker,
    pub cfg: &'a PerturbationConfig,
    pub k: usize,
}

/// Derives the per-example stream seed.
pub fn example_seed(base: u64, index: usize) -> u64 {
    let mut z = base ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sub_seed(seed: u64, step: Step) -> u64 {
    example_seed(seed, step as usize + 1)
}

/// Builds every enabled perturbed context set for query `x`.
///
/// `clean` is the query's ordinary retrieval result; `exclude` removes ids
/// from every retrieval (the query's own KB row during training).
pub fn build_perturbed_contexts(
    x: &str,
    clean: &ContextSet,
    exclude: &[u64],
    pc: &PerturbationContext<'_>,
    seed: u64,
    generated: &mut GeneratedEntries,
) -> Result<Vec<PerturbedContext>> {
    let cfg = pc.cfg;
    let encoder = pc.snapshot.encoder();
    let mut out = Vec::new();

    if cfg.steps.adversarial_kb && !clean.is_empty() {
        let s = sub_seed(seed, Step::AdversarialKb);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut items = Vec::new();
        let mut strategies = Vec::new();
        for item in &clean.items {
            let entry = pc
                .snapshot
                .get(item.entry_id)
                .ok_or(Error::DanglingEntry(item.entry_id))?;
            for adv in generate_adversarial_entries(entry, pc.attacker, cfg.variants_per_context, &mut rng)? {
                strategies.push(adv.strategy);
                let id = generated.add(encoder, adv.text, adv.intended_label, adv.derived_from, Some(adv.strategy));
                // The variant takes over the slot, and the retrieval score, of
                // the context it was derived from.
                items.push(ContextItem { entry_id: id, score: item.score });
            }
        }
        let strategy = strategies.first().copied().filter(|s| strategies.iter().all(|t| t == s));
        out.push(PerturbedContext {
            step: Step::AdversarialKb,
            seed: s,
            strategy,
            variant: None,
            query: None,
            context: ContextSet::from_candidates(items, pc.k),
        });
    }

    if cfg.steps.encoder_variation {
        let s = sub_seed(seed, Step::EncoderVariation);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (variant, ctx) = perturb_retrieval(x, pc.variants, pc.k, cfg.variant_epsilon, exclude, &mut rng)?;
        if !ctx.is_empty() {
            out.push(PerturbedContext {
                step: Step::EncoderVariation,
                seed: s,
                strategy: None,
                variant: Some(variant),
                query: None,
                context: ctx,
            });
        }
    }

    if cfg.steps.threshold_relaxing {
        let s = sub_seed(seed, Step::ThresholdRelaxing);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let q = encoder.encode(x);
        let band = pc
            .snapshot
            .retrieve_relaxed_encoded(&q, cfg.delta, cfg.epsilon, exclude, ExecMode::Sequential)?;
        if !band.is_empty() {
            let picked: Vec<ContextItem> = band.items.choose_multiple(&mut rng, pc.k).copied().collect();
            out.push(PerturbedContext {
                step: Step::ThresholdRelaxing,
                seed: s,
                strategy: None,
                variant: None,
                query: None,
                context: ContextSet::from_candidates(picked, pc.k),
            });
        }
    }

    if cfg.steps.sampling {
        let s = sub_seed(seed, Step::Sampling);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let noise = TextNoise {
            char_edit_rate: cfg.char_edit_rate,
            word_swap_rate: cfg.word_swap_rate,
        };
        let noisy_query = perturb_text(x, noise, &mut rng);
        let q = encoder.encode(&noisy_query);
        let mut items = Vec::new();
        for item in &clean.items {
            let entry = pc
                .snapshot
                .get(item.entry_id)
                .ok_or(Error::DanglingEntry(item.entry_id))?;
            let text = perturb_text(&entry.text, noise, &mut rng);
            let id = generated.add(encoder, text, entry.label, entry.id, None);
            let score = crate::encoder::similarity(&q, &generated.entries[&id].encoded(), encoder.metric())?;
            items.push(ContextItem { entry_id: id, score });
        }
        out.push(PerturbedContext {
            step: Step::Sampling,
            seed: s,
            strategy: None,
            variant: None,
            query: Some(noisy_query),
            context: ContextSet::from_candidates(items, pc.k),
        });
    }

    Ok(out)
}

/// Materialized perturbations for a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub index: usize,
    pub text: String,
    pub label: Label,
    pub clean: ContextSet,
    pub variants: Vec<PerturbedContext>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum FileLine {
    Header {
        format: String,
        version: u32,
        examples: usize,
        entries: usize,
    },
    Entry {
        id: u64,
        text: String,
        label: Label,
        derived_from: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        strategy: Option<Strategy>,
    },
    Example(PerturbationRecord),
}

const PERTURBATION_FORMAT: &str = "adrag-perturbations";

/// Writes generated entries (ascending id) followed by one record per example.
pub fn write_perturbation_file(
    path: impl AsRef<Path>,
    records: &[PerturbationRecord],
    generated: &GeneratedEntries,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut put = |line: &FileLine| -> Result<()> {
        serde_json::to_writer(&mut out, line)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))
    };
    put(&FileLine::Header {
        format: PERTURBATION_FORMAT.into(),
        version: 1,
        examples: records.len(),
        entries: generated.entries.len(),
    })?;
    let mut ids: Vec<&u64> = generated.entries.keys().collect();
    ids.sort_unstable();
    for id in ids {
        let e = &generated.entries[id];
        let (derived_from, strategy) = generated.provenance.get(id).copied().unwrap_or((e.id, None));
        put(&FileLine::Entry {
            id: e.id,
            text: e.text.clone(),
            label: e.label,
            derived_from,
            strategy,
        })?;
    }
    for r in records {
        put(&FileLine::Example(r.clone()))?;
    }
    drop(put);
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a perturbation file, re-embedding generated entries with `encoder`.
pub fn read_perturbation_file(
    path: impl AsRef<Path>,
    encoder: &Encoder,
) -> Result<(Vec<PerturbationRecord>, GeneratedEntries)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut generated = GeneratedEntries::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FileLine = serde_json::from_str(&line).map_err(|e| Error::DatasetLine {
            line: i + 1,
            reason: e.to_string(),
        })?;
        match parsed {
            FileLine::Header { format, .. } if format != PERTURBATION_FORMAT => {
                return Err(Error::DatasetLine {
                    line: i + 1,
                    reason: format!("unexpected format {format}"),
                })
            }
            FileLine::Header { .. } => {}
            FileLine::Entry {
                id,
                text,
                label,
                derived_from,
                strategy,
            } => {
                let enc: EncodedText = encoder.encode(&text);
                generated.entries.insert(
                    id,
                    KbEntry {
                        id,
                        text,
                        label,
                        embedding: enc.embedding,
                        token_set: enc.tokens,
                        meta: EntryMeta {
                            source: Source::Adversarial,
                            timestamp: 0,
                            confidence: 0.0,
                        },
                    },
                );
                generated.provenance.insert(id, (derived_from, strategy));
                generated.next_id = generated.next_id.max(id + 1);
            }
            FileLine::Example(r) => records.push(r),
        }
    }
    Ok((records, generated))
}
