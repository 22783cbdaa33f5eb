//! One TOML document with encoder, kb, model, perturbation, training, data
//! and service sections.
//!
//! Precedence, lowest first: file, `ADRAG_<SECTION>__<KEY>` environment
//! variables, `--set section.key=value` flags. Values are parsed as TOML
//! literals and fall back to plain strings.

use std::path::{Path, PathBuf};

use adrag_core::dataset::DatasetOptions;
use adrag_core::encoder::EncoderConfig;
use adrag_core::guard::GuardCapacity;
use adrag_core::perturbation::PerturbationConfig;
use adrag_core::training::{RetrievalParams, Schedule, SkdConfig, TrainConfig};
use adrag_core::types::sha256_hex;
use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "ADRAG_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AppConfig {
    pub encoder: EncoderConfig,
    pub kb: KbSection,
    pub model: ModelSection,
    pub perturbation: PerturbationConfig,
    pub training: TrainingSection,
    pub data: DataSection,
    pub service: ServiceSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct KbSection {
    /// Persisted KB file. When absent the KB is built from the dataset's
    /// training split.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// Checkpoint the service classifies with.
    pub params: Option<PathBuf>,
    pub k: usize,
    pub epsilon: f64,
    pub self_exclude: bool,
    pub teacher: GuardCapacity,
    pub student: GuardCapacity,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let r = RetrievalParams::default();
        ModelSection {
            params: None,
            k: r.k,
            epsilon: r.epsilon,
            self_exclude: r.self_exclude,
            teacher: GuardCapacity::teacher(),
            student: GuardCapacity::student(),
            init_seed: 1,
        }
    }
}

impl ModelSection {
    pub fn retrieval(&self) -> RetrievalParams {
        RetrievalParams {
            k: self.k,
            epsilon: self.epsilon,
            self_exclude: self.self_exclude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Explicit mode sequence; the canonical three-stage split of
    /// `skd_epochs` otherwise.
    pub schedule: Option<Vec<u8>>,
    pub skd_epochs: usize,
    pub kl_weight: f64,
    pub ce_weight: f64,
    pub reward_weight: f64,
    pub student_lr: Option<f64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let skd = SkdConfig::default();
        TrainingSection {
            train: TrainConfig::default(),
            schedule: None,
            skd_epochs: 15,
            kl_weight: skd.kl_weight,
            ce_weight: skd.ce_weight,
            reward_weight: skd.reward_weight,
            student_lr: None,
        }
    }
}

impl TrainingSection {
    pub fn skd(&self) -> SkdConfig {
        SkdConfig {
            train: self.train,
            kl_weight: self.kl_weight,
            ce_weight: self.ce_weight,
            reward_weight: self.reward_weight,
            student_lr: self.student_lr,
        }
    }

    pub fn schedule(&self) -> adrag_core::Result<Schedule> {
        match &self.schedule {
            Some(modes) => Schedule::new(modes.clone()),
            None => Schedule::canonical(self.skd_epochs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    #[serde(flatten)]
    pub options: DatasetOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSection {
    pub bind: String,
    /// Total latency budget τ.
    pub tau_ms: f64,
    /// Classify on the query alone when retrieval exceeds its sub-budget.
    pub strict: bool,
    pub retrieval_budget_ms: f64,
    pub window_secs: u64,
    pub feedback_k: usize,
    pub feedback_log: Option<PathBuf>,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            bind: "127.0.0.1:8080".into(),
            tau_ms: 10.0,
            strict: false,
            retrieval_budget_ms: 5.0,
            window_secs: 60,
            feedback_k: adrag_core::ekb::DEFAULT_MIN_LABELS,
            feedback_log: None,
        }
    }
}

impl AppConfig {
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.encoder.validate()?;
        self.perturbation.validate()?;
        self.training.train.validate()?;
        self.training.skd().validate()?;
        self.model.teacher.validate()?;
        self.model.student.validate()?;
        if !(0.0..=1.0).contains(&self.model.epsilon) {
            bail!("model.epsilon must lie in [0, 1], got {}", self.model.epsilon);
        }
        if self.model.k == 0 {
            bail!("model.k must be ≥ 1");
        }
        if self.service.feedback_k == 0 {
            bail!("service.feedback_k must be ≥ 1");
        }
        if !(self.service.tau_ms > 0.0) {
            bail!("service.tau_ms must be > 0");
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, path: &[String], value: toml::Value) -> anyhow::Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| anyhow!("empty key"))?;
    let mut table = root;
    for seg in parents {
        let slot = table
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = slot
            .as_table_mut()
            .ok_or_else(|| anyhow!("{seg} is not a table"))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Resolves the configuration. `env` is passed in so callers and tests
/// control which variables count.
pub fn load_config<I>(file: Option<&Path>, env: I, sets: &[String]) -> anyhow::Result<AppConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut root = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => toml::Table::new(),
    };
    let mut env: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.contains("__"))
        .collect();
    env.sort();
    for (k, v) in env {
        let path: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        set_path(&mut root, &path, parse_value(&v)).with_context(|| format!("environment override {k}"))?;
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects section.key=value, got {s:?}"))?;
        let path: Vec<String> = k.trim().split('.').map(str::to_string).collect();
        set_path(&mut root, &path, parse_value(v.trim())).with_context(|| format!("--set {s}"))?;
    }
    let cfg: AppConfig = toml::Value::Table(root).try_into().context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}
