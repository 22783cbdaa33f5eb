//! Shared service state and the retrieve → infer classification path.

use std::sync::Arc;
use std::time::{Duration, Instant};

use adrag_core::dataset::load_dataset;
use adrag_core::ekb::{FeedbackRecord, FeedbackStore, GeneratorInterface, TemplateGenerator};
use adrag_core::guard::{build_input, GuardParams};
use adrag_core::kb::{ContextSet, KnowledgeBase};
use adrag_core::par::ExecMode;
use adrag_core::training::build_training_kb;
use adrag_core::Label;
use anyhow::{bail, Context};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::config::{AppConfig, ServiceSection};
use crate::metrics::{Metrics, StageTimings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRef {
    pub entry_id: u64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub t_ret_us: u64,
    pub t_inf_us: u64,
    pub t_tot_us: u64,
    /// Time inside the total not attributed to either stage.
    pub slack_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub label: Label,
    pub p_unsafe: f64,
    pub context: Vec<ContextRef>,
    pub timings: Timings,
    pub budget_exceeded: bool,
    /// Strict mode dropped the context because retrieval overran its share.
    pub fallback: bool,
    pub kb_epoch: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ClassifyError {
    #[error("model not loaded")]
    NoModel,
    #[error("text must be nonempty")]
    EmptyText,
    #[error(transparent)]
    Core(#[from] adrag_core::Error),
}

/// Record view for the review queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordView {
    #[serde(flatten)]
    pub record: FeedbackRecord,
    pub consensus: Option<Label>,
    /// k − n while labels agree; absent once they conflict.
    pub labels_needed: Option<usize>,
    pub promotable: bool,
}

impl RecordView {
    pub fn new(record: FeedbackRecord, k: usize) -> Self {
        RecordView {
            consensus: record.consensus(),
            labels_needed: record.labels_needed(k),
            promotable: record.status == adrag_core::ekb::RecordStatus::Pending && record.is_confident(k),
            record,
        }
    }
}

pub struct ServiceState {
    pub kb: Arc<KnowledgeBase>,
    model: RwLock<Option<Arc<GuardParams>>>,
    pub feedback: FeedbackStore,
    pub metrics: Metrics,
    pub cfg: ServiceSection,
    pub epsilon: f64,
    pub generator: Box<dyn GeneratorInterface>,
}

fn micros(d: Duration) -> u64 {
    d.as_micros() as u64
}

impl ServiceState {
    pub fn new(kb: Arc<KnowledgeBase>, model: Option<GuardParams>, epsilon: f64, cfg: ServiceSection) -> anyhow::Result<Self> {
        let feedback = match &cfg.feedback_log {
            Some(p) => FeedbackStore::with_log(cfg.feedback_k, p)?,
            None => FeedbackStore::new(cfg.feedback_k)?,
        };
        let state = ServiceState {
            kb,
            model: RwLock::new(None),
            feedback,
            metrics: Metrics::new(Duration::from_secs(cfg.window_secs.max(1))),
            cfg,
            epsilon,
            generator: Box::new(TemplateGenerator),
        };
        if let Some(m) = model {
            state.set_model(m)?;
        }
        Ok(state)
    }

    /// KB from `kb.path`, else from the dataset's training split, else
    /// empty; model from `model.params` when set.
    pub fn from_config(cfg: &AppConfig) -> anyhow::Result<Self> {
        let kb = if let Some(p) = &cfg.kb.path {
            KnowledgeBase::load(p, cfg.encoder.clone())?
        } else if let Some(p) = &cfg.data.path {
            let ds = load_dataset(p, &cfg.data.options)?;
            build_training_kb(&ds.train, cfg.encoder.clone())?
        } else {
            let kb = KnowledgeBase::new(cfg.encoder.clone())?;
            kb.publish_snapshot();
            kb
        };
        let model = match &cfg.model.params {
            Some(p) => Some(GuardParams::load(p).with_context(|| format!("loading model {}", p.display()))?),
            None => None,
        };
        Self::new(Arc::new(kb), model, cfg.model.epsilon, cfg.service.clone())
    }

    pub fn set_model(&self, params: GuardParams) -> anyhow::Result<()> {
        if params.layout.dimension != self.kb.encoder().dimension() {
            bail!(
                "model expects {}-dim embeddings, KB encoder produces {}",
                params.layout.dimension,
                self.kb.encoder().dimension()
            );
        }
        *self.model.write() = Some(Arc::new(params));
        Ok(())
    }

    pub fn model(&self) -> Option<Arc<GuardParams>> {
        self.model.read().clone()
    }

    pub fn classify(&self, text: &str) -> Result<ClassifyResponse, ClassifyError> {
        let model = self.model().ok_or(ClassifyError::NoModel)?;
        if text.trim().is_empty() {
            return Err(ClassifyError::EmptyText);
        }
        let layout = model.layout;
        let t0 = Instant::now();
        let snap = self.kb.snapshot();
        let encoder = snap.encoder();
        let q = encoder.encode(text);
        let mut ctx = snap.retrieve_topk_encoded(&q, layout.k, self.epsilon, &[], ExecMode::default())?;
        let t_ret = t0.elapsed();
        let fallback = self.cfg.strict && t_ret.as_secs_f64() * 1e3 > self.cfg.retrieval_budget_ms;
        if fallback {
            ctx = ContextSet::empty(layout.k);
        }
        let t1 = Instant::now();
        let (features, _) = build_input(text, &ctx, snap.as_ref(), encoder, layout)?;
        let dist = model.forward(&features)?;
        let t_inf = t1.elapsed();
        let t_tot = t0.elapsed();

        let timings = StageTimings {
            t_ret_us: micros(t_ret),
            t_inf_us: micros(t_inf),
            t_tot_us: micros(t_tot),
        };
        let budget_exceeded = t_tot.as_secs_f64() * 1e3 > self.cfg.tau_ms;
        self.metrics.record(timings, budget_exceeded, fallback);
        Ok(ClassifyResponse {
            label: dist.label(),
            p_unsafe: dist.prob(Label::Unsafe),
            context: ctx
                .items
                .iter()
                .map(|it| ContextRef {
                    entry_id: it.entry_id,
                    similarity: it.score,
                })
                .collect(),
            timings: Timings {
                t_ret_us: timings.t_ret_us,
                t_inf_us: timings.t_inf_us,
                t_tot_us: timings.t_tot_us,
                slack_us: timings.t_tot_us.saturating_sub(timings.t_ret_us + timings.t_inf_us),
            },
            budget_exceeded,
            fallback,
            kb_epoch: snap.epoch(),
        })
    }
}
