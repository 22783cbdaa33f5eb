//! Seeded synthetic corpora with planted structure.
//!
//! Texts are built from pronounceable pseudo-words so that every overlap
//! between two texts is deliberate. Each generator documents what it plants;
//! the diagnostics and robustness checks measure against exactly that.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::perturbation::{RuleBasedAttacker, Strategy};
use crate::types::Label;

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gr", "kl", "pl", "st", "tr", "sk",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ei"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "k", "l", "m", "x"];

/// Distinct pseudo-words, never colliding with earlier draws from the same pool.
#[derive(Debug)]
pub struct WordPool {
    rng: ChaCha8Rng,
    seen: HashSet<String>,
}

impl WordPool {
    pub fn new(seed: u64) -> Self {
        WordPool {
            rng: ChaCha8Rng::seed_from_u64(seed),
            seen: HashSet::new(),
        }
    }

    /// Reserves words so they are never generated.
    pub fn reserve<'a, I: IntoIterator<Item = &'a str>>(&mut self, words: I) {
        self.seen.extend(words.into_iter().map(str::to_string));
    }

    pub fn word(&mut self) -> String {
        loop {
            let syllables = self.rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(&mut self.rng).expect("onsets"));
                w.push_str(NUCLEI.choose(&mut self.rng).expect("nuclei"));
            }
            w.push_str(CODAS.choose(&mut self.rng).expect("codas"));
            if self.seen.insert(w.clone()) {
                return w;
            }
        }
    }

    pub fn words(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.word()).collect()
    }
}

pub const UNSAFE_CUES: &[&str] = &[
    "attack", "poison", "steal", "weapon", "explosive", "hack", "harm", "kill", "smuggle", "threaten", "stalk",
    "ransom", "sabotage", "counterfeit", "launder", "blackmail", "torch", "overdose", "breach", "ambush",
];

pub const SAFE_CUES: &[&str] = &[
    "recipe", "garden", "history", "learn", "museum", "poem", "exercise", "holiday", "budget", "painting", "recycle",
    "homework", "music", "volunteer", "bicycle", "science", "library", "hiking", "knitting", "astronomy",
];

fn cue_pool(label: Label) -> &'static [&'static str] {
    match label {
        Label::Safe => SAFE_CUES,
        Label::Unsafe => UNSAFE_CUES,
    }
}

fn cues(label: Label, vocab: usize) -> &'static [&'static str] {
    let pool = cue_pool(label);
    &pool[..vocab.clamp(1, pool.len())]
}

/// How misleading neighbours are made for a planted test query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantStyle {
    /// Label-flipping variants of the query from the rule-based attacker.
    Attacker,
    /// The query with one opposite-label cue word inserted.
    CueInsertion,
}

/// Families of related queries sharing a label, with label-indicative but
/// noisy cue words, and near-duplicate misleading entries planted next to a
/// fixed fraction of test queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuardCorpusConfig {
    pub families: usize,
    pub train_per_family: usize,
    pub test_per_family: usize,
    /// Family-specific words; each member uses a subsequence of them.
    pub signature_len: usize,
    pub signature_kept: usize,
    pub cue_words: usize,
    /// Probability a cue word comes from the opposite label's pool.
    pub cue_noise: f64,
    /// Cue words per label drawn from the head of each pool.
    pub cue_vocab: usize,
    pub planted_fraction: f64,
    pub plants_per_query: usize,
    pub plant_style: PlantStyle,
    pub seed: u64,
}

impl Default for GuardCorpusConfig {
    fn default() -> Self {
        GuardCorpusConfig {
            families: 500,
            train_per_family: 4,
            test_per_family: 1,
            signature_len: 8,
            signature_kept: 7,
            cue_words: 2,
            cue_noise: 0.25,
            cue_vocab: 20,
            planted_fraction: 0.7,
            plants_per_query: 3,
            plant_style: PlantStyle::Attacker,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardCorpus {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    /// Misleading entries: near-duplicates of planted test queries carrying
    /// the opposite label.
    pub plants: Vec<Example>,
    /// Indices into `test` that received plants.
    pub planted_queries: Vec<usize>,
}

fn insert_at_random(words: &mut Vec<String>, w: String, rng: &mut ChaCha8Rng) {
    let at = rng.gen_range(0..=words.len());
    words.insert(at, w);
}

fn family_member(signature: &[String], label: Label, cfg: &GuardCorpusConfig, rng: &mut ChaCha8Rng) -> String {
    let kept = cfg.signature_kept.min(signature.len());
    let mut idx = index::sample(rng, signature.len(), kept).into_vec();
    idx.sort_unstable();
    let mut words: Vec<String> = (0..cfg.cue_words)
        .map(|_| {
            let pool = if rng.gen_bool(cfg.cue_noise) {
                cues(label.flip(), cfg.cue_vocab)
            } else {
                cues(label, cfg.cue_vocab)
            };
            pool.choose(rng).expect("cues").to_string()
        })
        .collect();
    words.extend(idx.iter().map(|&i| signature[i].clone()));
    words.join(" ")
}

pub fn guard_corpus(cfg: &GuardCorpusConfig) -> GuardCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pool = WordPool::new(cfg.seed ^ 0xc0ffee);
    pool.reserve(UNSAFE_CUES.iter().chain(SAFE_CUES).copied());
    let mut train = Vec::new();
    let mut test = Vec::new();
    for f in 0..cfg.families {
        let label = if f % 2 == 0 { Label::Safe } else { Label::Unsafe };
        let signature = pool.words(cfg.signature_len);
        for _ in 0..cfg.train_per_family {
            train.push(Example::new(family_member(&signature, label, cfg, &mut rng), label));
        }
        for _ in 0..cfg.test_per_family {
            test.push(Example::new(family_member(&signature, label, cfg, &mut rng), label));
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);

    let n_planted = ((test.len() as f64) * cfg.planted_fraction).round() as usize;
    let mut planted_queries = index::sample(&mut rng, test.len(), n_planted).into_vec();
    planted_queries.sort_unstable();
    let mut plants = Vec::new();
    for &q in &planted_queries {
        let ex = &test[q];
        let opposite = ex.label.flip();
        match cfg.plant_style {
            PlantStyle::Attacker => {
                for _ in 0..cfg.plants_per_query {
                    let strategy = *[Strategy::LabelContradiction, Strategy::LexicalOverlap]
                        .choose(&mut rng)
                        .expect("strategies");
                    let (text, label) = RuleBasedAttacker.variant_text(&ex.text, ex.label, strategy, &mut rng);
                    plants.push(Example::new(text, label));
                }
            }
            PlantStyle::CueInsertion => {
                let picked: Vec<&&str> = cues(opposite, cfg.cue_vocab)
                    .choose_multiple(&mut rng, cfg.plants_per_query)
                    .collect();
                for cue in picked {
                    let mut words: Vec<String> = ex.text.split(' ').map(str::to_string).collect();
                    insert_at_random(&mut words, cue.to_string(), &mut rng);
                    plants.push(Example::new(words.join(" "), opposite));
                }
            }
        }
    }
    GuardCorpus {
        train,
        test,
        plants,
        planted_queries,
    }
}

/// Queries paired with knowledge-base rows for the retrieval diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedNeighbors {
    pub queries: Vec<Example>,
    pub kb: Vec<Example>,
    /// Indices of queries that received a planted neighbour of the given kind.
    pub planted: Vec<usize>,
}

fn random_text(pool: &mut WordPool, len: usize) -> Vec<String> {
    pool.words(len)
}

fn near_duplicate(words: &[String], extra: String) -> String {
    let mut w = words.to_vec();
    w.push(extra);
    w.join(" ")
}

/// Every query has exactly one near-duplicate KB row; for exactly
/// `round(fraction·n)` of them that row carries the opposite label.
pub fn mismatch_corpus(n: usize, fraction: f64, words_per_text: usize, seed: u64) -> PlantedNeighbors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = WordPool::new(seed ^ 0x5151);
    let n_mis = ((n as f64) * fraction).round() as usize;
    let mut planted = index::sample(&mut rng, n, n_mis).into_vec();
    planted.sort_unstable();
    let flip: HashSet<usize> = planted.iter().copied().collect();
    let mut queries = Vec::with_capacity(n);
    let mut kb = Vec::with_capacity(n);
    for i in 0..n {
        let label = if rng.gen_bool(0.5) { Label::Unsafe } else { Label::Safe };
        let words = random_text(&mut pool, words_per_text);
        let neighbour_label = if flip.contains(&i) { label.flip() } else { label };
        queries.push(Example::new(words.join(" "), label));
        kb.push(Example::new(near_duplicate(&words, pool.word()), neighbour_label));
    }
    kb.shuffle(&mut rng);
    PlantedNeighbors { queries, kb, planted }
}

/// Exactly `round(fraction·n)` queries get a near-duplicate KB row; the KB
/// is padded with `distractors` unrelated rows.
pub fn coverage_corpus(n: usize, fraction: f64, distractors: usize, words_per_text: usize, seed: u64) -> PlantedNeighbors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = WordPool::new(seed ^ 0xc0c0);
    let n_cov = ((n as f64) * fraction).round() as usize;
    let mut planted = index::sample(&mut rng, n, n_cov).into_vec();
    planted.sort_unstable();
    let covered: HashSet<usize> = planted.iter().copied().collect();
    let mut queries = Vec::with_capacity(n);
    let mut kb = Vec::new();
    for i in 0..n {
        let label = if rng.gen_bool(0.5) { Label::Unsafe } else { Label::Safe };
        let words = random_text(&mut pool, words_per_text);
        if covered.contains(&i) {
            kb.push(Example::new(near_duplicate(&words, pool.word()), label));
        }
        queries.push(Example::new(words.join(" "), label));
    }
    for _ in 0..distractors {
        let label = if rng.gen_bool(0.5) { Label::Unsafe } else { Label::Safe };
        kb.push(Example::new(random_text(&mut pool, words_per_text).join(" "), label));
    }
    kb.shuffle(&mut rng);
    PlantedNeighbors { queries, kb, planted }
}

/// A large KB of short texts over a shared vocabulary, plus queries drawn
/// from the same distribution. Used for load testing.
pub fn bulk_corpus(n_entries: usize, n_queries: usize, seed: u64) -> (Vec<Example>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = WordPool::new(seed ^ 0xb01c);
    let vocab = pool.words(5000);
    let sentence = |rng: &mut ChaCha8Rng| {
        let len = rng.gen_range(6..=14);
        let mut words: Vec<&str> = (0..len).map(|_| vocab.choose(rng).expect("vocab").as_str()).collect();
        let label = if rng.gen_bool(0.5) { Label::Unsafe } else { Label::Safe };
        words.push(cue_pool(label).choose(rng).expect("cues"));
        (words.join(" "), label)
    };
    let entries = (0..n_entries)
        .map(|_| {
            let (t, l) = sentence(&mut rng);
            Example::new(t, l)
        })
        .collect();
    let queries = (0..n_queries).map(|_| sentence(&mut rng).0).collect();
    (entries, queries)
}
