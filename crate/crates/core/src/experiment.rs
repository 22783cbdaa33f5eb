//! End-to-end trials on the planted guard corpus: robustness of adversarial
//! contextual training to misleading neighbours, and teacher→student
//! retention under a distillation schedule.

use serde::{Deserialize, Serialize};

use crate::corpus::{guard_corpus, GuardCorpus, GuardCorpusConfig};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::eval::evaluate;
use crate::guard::{FeatureLayout, GuardCapacity, GuardParams};
use crate::kb::{KbSnapshot, KnowledgeBase, NewEntry};
use crate::par::ExecMode;
use crate::perturbation::{PerturbationConfig, PerturbationContext, RuleBasedAttacker, VariantRetriever};
use crate::training::{
    build_training_kb, featurize, prepare_examples, raft_train, skd_train, supervised_contextual_finetune,
    Featurized, RetrievalParams, Schedule, SkdConfig, TrainConfig, TrainReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: GuardCorpusConfig,
    pub encoder: EncoderConfig,
    pub retrieval: RetrievalParams,
    pub perturbation: PerturbationConfig,
    pub train: TrainConfig,
    pub teacher: GuardCapacity,
    pub student: GuardCapacity,
    pub skd_epochs: usize,
    pub kl_weight: f64,
    pub ce_weight: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: GuardCorpusConfig {
                cue_vocab: 6,
                plants_per_query: 4,
                ..Default::default()
            },
            encoder: EncoderConfig::default(),
            retrieval: RetrievalParams::default(),
            perturbation: PerturbationConfig::default(),
            train: TrainConfig {
                epochs: 8,
                lambda: 1.0,
                ..Default::default()
            },
            teacher: GuardCapacity::teacher(),
            student: GuardCapacity::student(),
            skd_epochs: 15,
            kl_weight: 0.6,
            ce_weight: 0.4,
        }
    }
}

/// A corpus with its training KB, a planted KB and materialized features.
pub struct PreparedCorpus {
    pub corpus: GuardCorpus,
    pub clean: std::sync::Arc<KbSnapshot>,
    pub planted: std::sync::Arc<KbSnapshot>,
    pub layout: FeatureLayout,
    pub features: Vec<Featurized>,
}

/// Builds everything a trial needs for `seed`. The planted KB is the
/// training KB plus the corpus's misleading entries.
pub fn prepare_corpus(cfg: &ExperimentConfig, seed: u64, mode: ExecMode) -> Result<PreparedCorpus> {
    let corpus = guard_corpus(&GuardCorpusConfig {
        seed,
        ..cfg.corpus.clone()
    });
    let kb = build_training_kb(&corpus.train, cfg.encoder.clone())?;
    let clean = kb.snapshot();
    let variants = VariantRetriever::build(&clean, &cfg.perturbation.encoder_variants)?;
    let attacker = RuleBasedAttacker;
    let pc = PerturbationContext {
        snapshot: &clean,
        variants: &variants,
        attacker: &attacker,
        cfg: &cfg.perturbation,
        k: cfg.retrieval.k,
    };
    let prepared = prepare_examples(&corpus.train, &clean, cfg.retrieval, Some(&pc), seed, mode)?;
    let layout = FeatureLayout::new(cfg.encoder.dimension, cfg.retrieval.k);
    let features = featurize(&prepared, &clean, layout, mode)?;

    let planted_kb = KnowledgeBase::with_encoder(kb.encoder().clone());
    planted_kb.insert_many(
        corpus
            .train
            .iter()
            .chain(&corpus.plants)
            .map(|e| NewEntry::new(e.text.clone(), e.label).timestamp(0)),
    )?;
    planted_kb.publish_snapshot();
    Ok(PreparedCorpus {
        corpus,
        clean,
        planted: planted_kb.snapshot(),
        layout,
        features,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessOutcome {
    pub seed: u64,
    pub rft_clean_f1: f64,
    pub rft_planted_f1: f64,
    pub raft_clean_f1: f64,
    pub raft_planted_f1: f64,
    /// Planted queries whose top retrieved context is a plant.
    pub plant_top1_fraction: f64,
}

impl RobustnessOutcome {
    pub fn rft_drop(&self) -> f64 {
        self.rft_clean_f1 - self.rft_planted_f1
    }

    pub fn raft_drop(&self) -> f64 {
        self.raft_clean_f1 - self.raft_planted_f1
    }
}

/// Trains λ = 0 and λ = `cfg.train.lambda` models from the same init and
/// evaluates both with clean and with planted retrieval.
pub fn robustness_trial(cfg: &ExperimentConfig, seed: u64, mode: ExecMode) -> Result<RobustnessOutcome> {
    let pc = prepare_corpus(cfg, seed, mode)?;
    let train = TrainConfig { seed, ..cfg.train };
    let init = GuardParams::init(cfg.teacher, pc.layout, seed)?;
    let (rft, _) = supervised_contextual_finetune(init.clone(), &pc.features, &train, mode)?;
    let (raft, _) = raft_train(init, &pc.features, &train, mode)?;
    let eps = cfg.retrieval.epsilon;
    let test = &pc.corpus.test;

    let n_train = pc.corpus.train.len() as u64;
    let encoder = pc.planted.encoder();
    let mut top_plant = 0usize;
    for &q in &pc.corpus.planted_queries {
        let ctx = pc.planted.retrieve_topk_encoded(&encoder.encode(&test[q].text), 1, eps, &[], mode)?;
        if ctx.items.first().is_some_and(|it| it.entry_id >= n_train) {
            top_plant += 1;
        }
    }
    Ok(RobustnessOutcome {
        seed,
        rft_clean_f1: evaluate(&rft, test, &pc.clean, eps, mode)?.weighted_f1,
        rft_planted_f1: evaluate(&rft, test, &pc.planted, eps, mode)?.weighted_f1,
        raft_clean_f1: evaluate(&raft, test, &pc.clean, eps, mode)?.weighted_f1,
        raft_planted_f1: evaluate(&raft, test, &pc.planted, eps, mode)?.weighted_f1,
        plant_top1_fraction: top_plant as f64 / pc.corpus.planted_queries.len().max(1) as f64,
    })
}

#[derive(Debug, Clone)]
pub struct DistillationOutcome {
    pub seed: u64,
    pub teacher_f1: f64,
    pub student_f1: f64,
    pub teacher_params: usize,
    pub student_params: usize,
    pub report: TrainReport,
}

/// Distills with the canonical schedule and evaluates both models on the
/// held-out split with clean retrieval.
pub fn distillation_trial(cfg: &ExperimentConfig, seed: u64, mode: ExecMode) -> Result<DistillationOutcome> {
    let pc = prepare_corpus(cfg, seed, mode)?;
    let teacher = GuardParams::init(cfg.teacher, pc.layout, seed)?;
    let student = GuardParams::init(cfg.student, pc.layout, seed.wrapping_add(1000))?;
    let skd = SkdConfig {
        train: TrainConfig { seed, ..cfg.train },
        kl_weight: cfg.kl_weight,
        ce_weight: cfg.ce_weight,
        ..Default::default()
    };
    let out = skd_train(teacher, student, &pc.features, &Schedule::canonical(cfg.skd_epochs)?, &skd, mode)?;
    let eps = cfg.retrieval.epsilon;
    Ok(DistillationOutcome {
        seed,
        teacher_f1: evaluate(&out.teacher, &pc.corpus.test, &pc.clean, eps, mode)?.weighted_f1,
        student_f1: evaluate(&out.student, &pc.corpus.test, &pc.clean, eps, mode)?.weighted_f1,
        teacher_params: out.teacher.num_params(),
        student_params: out.student.num_params(),
        report: out.report,
    })
}
