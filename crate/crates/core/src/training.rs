//! Contextual fine-tuning, adversarial contextual fine-tuning and
//! schedule-driven teacher/student distillation.
//!
//! Training operates on [`Featurized`] examples: the clean retrieved context
//! and every materialized perturbed context are turned into feature vectors
//! once, up front. All losses reported per epoch are recomputed over the full
//! data at the params the epoch ended with, so a report row can be checked
//! independently against a checkpoint of those params.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalMetrics;
use crate::guard::{
    apply_update, build_input, weighted_gradients, weighted_loss, FeatureLayout, FeatureVector,
    GuardParams, LossMix, OptimizerConfig, PredictionDistribution, Sgd, Target, WeightedExample,
};
use crate::kb::{ContextSet, KbSnapshot, KnowledgeBase, NewEntry, Overlay};
use crate::par::{map_items, ExecMode};
use crate::perturbation::{
    build_perturbed_contexts, example_seed, GeneratedEntries, PerturbationContext, PerturbedContext,
    GENERATED_ID_BASE,
};
use crate::types::{sha256_hex, Label, Source};

/// Id space reserved per example for generated entries, so examples can be
/// perturbed independently and merged without renumbering.
const GENERATED_STRIDE: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub x: String,
    pub y: Label,
    pub clean_ctx: ContextSet,
    pub perturbed: Vec<PerturbedContext>,
}

#[derive(Debug, Clone, Default)]
pub struct PreparedExamples {
    pub examples: Vec<TrainExample>,
    pub generated: GeneratedEntries,
}

/// KB over the training rows; entry id = row index.
pub fn build_training_kb(train: &[Example], encoder: EncoderConfig) -> Result<KnowledgeBase> {
    let kb = KnowledgeBase::new(encoder)?;
    kb.insert_many(
        train
            .iter()
            .map(|e| NewEntry::new(e.text.clone(), e.label).source(Source::Seed).timestamp(0)),
    )?;
    kb.publish_snapshot();
    Ok(kb)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub k: usize,
    pub epsilon: f64,
    /// Drop the query's own KB row from its training contexts. Off by
    /// default: the KB is built from the training split, so a training query
    /// normally retrieves itself.
    pub self_exclude: bool,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams {
            k: 5,
            epsilon: 0.5,
            self_exclude: false,
        }
    }
}

/// Retrieves clean contexts and, when `perturb` is given, materializes the
/// perturbed context sets. Row `i` of `train` is assumed to be KB id `i`
/// when `self_exclude` is on.
pub fn prepare_examples(
    train: &[Example],
    snapshot: &KbSnapshot,
    retrieval: RetrievalParams,
    perturb: Option<&PerturbationContext<'_>>,
    seed: u64,
    mode: ExecMode,
) -> Result<PreparedExamples> {
    let encoder = snapshot.encoder();
    let indexed: Vec<(usize, &Example)> = train.iter().enumerate().collect();
    let rows = map_items(mode, &indexed, |&(i, ex)| -> Result<(TrainExample, GeneratedEntries)> {
        let own = i as u64;
        let exclude: &[u64] = if retrieval.self_exclude && snapshot.get(own).is_some_and(|e| e.text == ex.text) {
            std::slice::from_ref(&own)
        } else {
            &[]
        };
        let q = encoder.encode(&ex.text);
        let clean = snapshot.retrieve_topk_encoded(&q, retrieval.k, retrieval.epsilon, exclude, ExecMode::Sequential)?;
        let mut generated = GeneratedEntries::with_base(GENERATED_ID_BASE + own * GENERATED_STRIDE);
        let perturbed = match perturb {
            Some(pc) => build_perturbed_contexts(&ex.text, &clean, exclude, pc, example_seed(seed, i), &mut generated)?,
            None => Vec::new(),
        };
        Ok((
            TrainExample {
                x: ex.text.clone(),
                y: ex.label,
                clean_ctx: clean,
                perturbed,
            },
            generated,
        ))
    });
    let mut out = PreparedExamples {
        examples: Vec::with_capacity(train.len()),
        generated: GeneratedEntries::new(),
    };
    for r in rows {
        let (ex, gen) = r?;
        out.examples.push(ex);
        out.generated.merge(gen);
    }
    Ok(out)
}

/// Feature vectors for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurized {
    pub y: Label,
    pub clean: FeatureVector,
    pub perturbed: Vec<FeatureVector>,
}

pub fn featurize(
    prepared: &PreparedExamples,
    snapshot: &KbSnapshot,
    layout: FeatureLayout,
    mode: ExecMode,
) -> Result<Vec<Featurized>> {
    let encoder = snapshot.encoder();
    let out = map_items(mode, &prepared.examples, |ex| -> Result<Featurized> {
        let resolver = Overlay {
            base: snapshot,
            extra: &prepared.generated.entries,
        };
        let (clean, _) = build_input(&ex.x, &ex.clean_ctx, &resolver, encoder, layout)?;
        let perturbed = ex
            .perturbed
            .iter()
            .map(|p| {
                let x = p.query.as_deref().unwrap_or(&ex.x);
                build_input(x, &p.context, &resolver, encoder, layout).map(|(f, _)| f)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Featurized {
            y: ex.y,
            clean,
            perturbed,
        })
    });
    out.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Weight of the adversarial term; ignored by plain contextual fine-tuning.
    pub lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            lr: 0.05,
            batch_size: 32,
            momentum: 0.9,
            seed: 7,
            lambda: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be finite and ≥ 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            momentum: self.momentum,
        }
    }
}

fn config_hash<T: Serialize>(cfg: &T) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Sft,
    Raft,
    Skd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    /// 1-based.
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<u8>,
    pub l_train: f64,
    pub l_adv: f64,
    pub l_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_student: Option<f64>,
    pub teacher_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: RunKind,
    pub seed: u64,
    pub lambda: f64,
    pub config_hash: String,
    pub initial_teacher_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_student_hash: Option<String>,
    pub epochs: Vec<EpochRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_metrics: Option<EvalMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_metrics: Option<EvalMetrics>,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    /// Checks every epoch's hashes against the mode table: mode 0 leaves the
    /// student unchanged, mode 1 leaves the teacher unchanged, and the
    /// trained side of each mode changes unless the learning rate is zero.
    pub fn audit_modes(&self) -> std::result::Result<(), String> {
        let mut teacher = self.initial_teacher_hash.as_str();
        let mut student = self.initial_student_hash.as_deref();
        for row in &self.epochs {
            let t_changed = row.teacher_hash != teacher;
            let s_changed = row.student_hash.as_deref() != student;
            match row.mode {
                Some(0) if s_changed => return Err(format!("epoch {}: mode 0 changed the student", row.epoch)),
                Some(1) if t_changed => return Err(format!("epoch {}: mode 1 changed the teacher", row.epoch)),
                _ => {}
            }
            teacher = &row.teacher_hash;
            student = row.student_hash.as_deref();
        }
        Ok(())
    }
}

/// Mean clean-context CE, mean adversarial CE and their λ-combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaftLosses {
    pub l_train: f64,
    pub l_adv: f64,
    pub l_total: f64,
}

/// Terms of the clean objective over `idx`: mean CE.
fn train_terms<'a>(data: &'a [Featurized], idx: &[usize]) -> Vec<WeightedExample<'a>> {
    let w = 1.0 / idx.len() as f64;
    idx.iter()
        .map(|&i| WeightedExample {
            features: &data[i].clean,
            target: Target::Hard(data[i].y),
            weight: w,
        })
        .collect()
}

/// Terms of the adversarial objective over `idx`: CE averaged over each
/// example's perturbed sets, then over the examples that have any.
fn adv_terms<'a>(data: &'a [Featurized], idx: &[usize]) -> Vec<WeightedExample<'a>> {
    let with: Vec<usize> = idx.iter().copied().filter(|&i| !data[i].perturbed.is_empty()).collect();
    let mut out = Vec::new();
    for &i in &with {
        let w = 1.0 / (with.len() * data[i].perturbed.len()) as f64;
        for f in &data[i].perturbed {
            out.push(WeightedExample {
                features: f,
                target: Target::Hard(data[i].y),
                weight: w,
            });
        }
    }
    out
}

pub fn raft_losses(params: &GuardParams, data: &[Featurized], lambda: f64, mode: ExecMode) -> Result<RaftLosses> {
    let all: Vec<usize> = (0..data.len()).collect();
    let l_train = weighted_loss(params, &train_terms(data, &all), mode)?;
    let adv = adv_terms(data, &all);
    let l_adv = if adv.is_empty() {
        0.0
    } else {
        weighted_loss(params, &adv, mode)?
    };
    Ok(RaftLosses {
        l_train,
        l_adv,
        l_total: l_train + lambda * l_adv,
    })
}

fn epoch_error(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFiniteLoss { .. } | Error::NonFiniteUpdate => Error::NonFiniteEpoch { epoch },
        other => other,
    }
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One optimizer step on `L_train + λ·L_adv` over the batch. With λ = 0 the
/// adversarial gradient is never formed, so the update is exactly the clean
/// one.
fn teacher_step(
    params: &mut GuardParams,
    opt: &mut Sgd,
    data: &[Featurized],
    batch: &[usize],
    lambda: f64,
    lr: f64,
    mode: ExecMode,
) -> Result<()> {
    let (_, mut grad) = weighted_gradients(params, &train_terms(data, batch), mode)?;
    if lambda != 0.0 {
        let adv = adv_terms(data, batch);
        if !adv.is_empty() {
            let (_, g_adv) = weighted_gradients(params, &adv, mode)?;
            for (g, a) in grad.iter_mut().zip(&g_adv) {
                *g += lambda * a;
            }
        }
    }
    apply_update(params, &grad, opt, lr)
}

/// Called after every epoch with that epoch's report row and params.
pub type EpochObserver<'a> = &'a mut dyn FnMut(&EpochRow, &GuardParams);

fn run_teacher(
    kind: RunKind,
    mut params: GuardParams,
    data: &[Featurized],
    cfg: &TrainConfig,
    lambda: f64,
    mode: ExecMode,
    mut observer: Option<EpochObserver<'_>>,
) -> Result<(GuardParams, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut report = TrainReport {
        kind,
        seed: cfg.seed,
        lambda,
        config_hash: config_hash(&(kind, cfg, lambda)),
        initial_teacher_hash: params.fingerprint(),
        initial_student_hash: None,
        epochs: Vec::with_capacity(cfg.epochs),
        teacher_metrics: None,
        student_metrics: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.optimizer(), params.num_params());
    for epoch in 1..=cfg.epochs {
        let fail = epoch_error(epoch);
        for batch in shuffled_batches(data.len(), cfg.batch_size, &mut rng) {
            teacher_step(&mut params, &mut opt, data, &batch, lambda, cfg.lr, mode).map_err(&fail)?;
        }
        let l = raft_losses(&params, data, lambda, mode).map_err(&fail)?;
        if !l.l_total.is_finite() {
            return Err(Error::NonFiniteEpoch { epoch });
        }
        let row = EpochRow {
            epoch,
            mode: None,
            l_train: l.l_train,
            l_adv: l.l_adv,
            l_total: l.l_total,
            l_student: None,
            teacher_hash: params.fingerprint(),
            student_hash: None,
        };
        if let Some(obs) = observer.as_mut() {
            obs(&row, &params);
        }
        report.epochs.push(row);
    }
    Ok((params, report))
}

/// Minimizes mean CE over clean contexts only.
pub fn supervised_contextual_finetune(
    params: GuardParams,
    data: &[Featurized],
    cfg: &TrainConfig,
    mode: ExecMode,
) -> Result<(GuardParams, TrainReport)> {
    run_teacher(RunKind::Sft, params, data, cfg, 0.0, mode, None)
}

/// Minimizes `L_train + λ·L_adv` with λ = `cfg.lambda`.
pub fn raft_train(
    params: GuardParams,
    data: &[Featurized],
    cfg: &TrainConfig,
    mode: ExecMode,
) -> Result<(GuardParams, TrainReport)> {
    raft_train_observed(params, data, cfg, mode, None)
}

pub fn raft_train_observed(
    params: GuardParams,
    data: &[Featurized],
    cfg: &TrainConfig,
    mode: ExecMode,
    observer: Option<EpochObserver<'_>>,
) -> Result<(GuardParams, TrainReport)> {
    if !data.iter().any(|d| !d.perturbed.is_empty()) {
        return Err(Error::InvalidConfig("adversarial training needs at least one perturbed context".into()));
    }
    run_teacher(RunKind::Raft, params, data, cfg, cfg.lambda, mode, observer)
}

/// Per-epoch update modes: 0 trains the teacher only, 2 trains both, 1
/// trains the student against a frozen teacher.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule {
    modes: Vec<u8>,
}

impl Schedule {
    pub fn new(modes: Vec<u8>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::InvalidSchedule("no epochs".into()));
        }
        if let Some((i, m)) = modes.iter().enumerate().find(|(_, &m)| m > 2) {
            return Err(Error::InvalidSchedule(format!("epoch {} has mode {m}", i + 1)));
        }
        Ok(Schedule { modes })
    }

    /// Teacher-only, joint, then student-only stages of near-equal length.
    /// Leftover epochs go to the teacher-only stage first, then the joint one.
    pub fn canonical(epochs: usize) -> Result<Self> {
        let base = epochs / 3;
        let rem = epochs % 3;
        let n0 = base + usize::from(rem >= 1);
        let n2 = base + usize::from(rem >= 2);
        Self::three_stage(epochs, n0, n0 + n2)
    }

    /// Mode 0 for epochs `1..=t1`, mode 2 for `t1+1..=t2`, mode 1 after.
    pub fn three_stage(epochs: usize, t1: usize, t2: usize) -> Result<Self> {
        if !(1 <= t1 && t1 <= t2 && t2 <= epochs) {
            return Err(Error::InvalidSchedule(format!(
                "need 1 ≤ T1 ≤ T2 ≤ T, got T1={t1} T2={t2} T={epochs}"
            )));
        }
        let modes = (1..=epochs)
            .map(|t| if t <= t1 { 0 } else if t <= t2 { 2 } else { 1 })
            .collect();
        Self::new(modes)
    }

    pub fn modes(&self) -> &[u8] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// `(T1, T2)` when the schedule has the three-stage shape.
    pub fn transitions(&self) -> Option<(usize, usize)> {
        let t1 = self.modes.iter().take_while(|&&m| m == 0).count();
        let t2 = t1 + self.modes[t1..].iter().take_while(|&&m| m == 2).count();
        let tail_ok = self.modes[t2..].iter().all(|&m| m == 1);
        (t1 >= 1 && tail_ok).then_some((t1, t2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkdConfig {
    pub train: TrainConfig,
    pub kl_weight: f64,
    pub ce_weight: f64,
    pub reward_weight: f64,
    /// Student learning rate; the teacher's when absent.
    pub student_lr: Option<f64>,
}

impl Default for SkdConfig {
    fn default() -> Self {
        SkdConfig {
            train: TrainConfig::default(),
            kl_weight: 0.6,
            ce_weight: 0.4,
            reward_weight: 0.0,
            student_lr: None,
        }
    }
}

impl SkdConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let w = [self.kl_weight, self.ce_weight, self.reward_weight];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidConfig("distillation weights must be finite and ≥ 0".into()));
        }
        if ((self.kl_weight + self.ce_weight) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "kl_weight + ce_weight must equal 1, got {} + {}",
                self.kl_weight, self.ce_weight
            )));
        }
        if let Some(lr) = self.student_lr {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::InvalidConfig(format!("student_lr must be ≥ 0, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn mix(&self) -> LossMix {
        LossMix {
            kl: self.kl_weight,
            ce: self.ce_weight,
            reward: self.reward_weight,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SkdOutcome {
    pub teacher: GuardParams,
    pub student: GuardParams,
    pub report: TrainReport,
}

fn teacher_outputs(teacher: &GuardParams, data: &[Featurized], idx: &[usize], mode: ExecMode) -> Result<Vec<PredictionDistribution>> {
    let out = map_items(mode, idx, |&i| teacher.forward(&data[i].clean));
    out.into_iter().collect()
}

fn student_terms<'a>(
    data: &'a [Featurized],
    idx: &[usize],
    teacher: &[PredictionDistribution],
    mix: LossMix,
) -> Vec<WeightedExample<'a>> {
    let w = 1.0 / idx.len() as f64;
    idx.iter()
        .zip(teacher)
        .map(|(&i, t)| WeightedExample {
            features: &data[i].clean,
            target: Target::Distill {
                teacher: *t,
                label: data[i].y,
                mix,
            },
            weight: w,
        })
        .collect()
}

/// Mean student objective over all data against the given teacher.
pub fn student_loss(
    teacher: &GuardParams,
    student: &GuardParams,
    data: &[Featurized],
    mix: LossMix,
    mode: ExecMode,
) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    let t = teacher_outputs(teacher, data, &all, mode)?;
    weighted_loss(student, &student_terms(data, &all, &t, mix), mode)
}

/// Runs `schedule.len()` epochs; `cfg.train.epochs` is ignored. The teacher
/// objective is the adversarial one with `cfg.train.lambda`. In mode 2 each
/// batch first updates the teacher, then distills the student from the
/// updated teacher's outputs on that batch.
pub fn skd_train(
    teacher: GuardParams,
    student: GuardParams,
    data: &[Featurized],
    schedule: &Schedule,
    cfg: &SkdConfig,
    mode: ExecMode,
) -> Result<SkdOutcome> {
    cfg.validate()?;
    if schedule.is_empty() {
        return Err(Error::InvalidSchedule("no epochs".into()));
    }
    if teacher.layout != student.layout {
        return Err(Error::Shape("teacher and student feature layouts differ".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut teacher, mut student) = (teacher, student);
    let mix = cfg.mix();
    let lambda = cfg.train.lambda;
    let t_lr = cfg.train.lr;
    let s_lr = cfg.student_lr.unwrap_or(t_lr);
    let mut report = TrainReport {
        kind: RunKind::Skd,
        seed: cfg.train.seed,
        lambda,
        config_hash: config_hash(&(RunKind::Skd, cfg, schedule)),
        initial_teacher_hash: teacher.fingerprint(),
        initial_student_hash: Some(student.fingerprint()),
        epochs: Vec::with_capacity(schedule.len()),
        teacher_metrics: None,
        student_metrics: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut t_opt = Sgd::new(cfg.train.optimizer(), teacher.num_params());
    let mut s_opt = Sgd::new(cfg.train.optimizer(), student.num_params());
    for (e, &m) in schedule.modes().iter().enumerate() {
        let epoch = e + 1;
        let fail = epoch_error(epoch);
        for batch in shuffled_batches(data.len(), cfg.train.batch_size, &mut rng) {
            if m == 0 || m == 2 {
                teacher_step(&mut teacher, &mut t_opt, data, &batch, lambda, t_lr, mode).map_err(&fail)?;
            }
            if m == 1 || m == 2 {
                let t = teacher_outputs(&teacher, data, &batch, mode).map_err(&fail)?;
                let (_, g) = weighted_gradients(&student, &student_terms(data, &batch, &t, mix), mode).map_err(&fail)?;
                apply_update(&mut student, &g, &mut s_opt, s_lr).map_err(&fail)?;
            }
        }
        let l = raft_losses(&teacher, data, lambda, mode).map_err(&fail)?;
        let ls = student_loss(&teacher, &student, data, mix, mode).map_err(&fail)?;
        if !(l.l_total.is_finite() && ls.is_finite()) {
            return Err(Error::NonFiniteEpoch { epoch });
        }
        report.epochs.push(EpochRow {
            epoch,
            mode: Some(m),
            l_train: l.l_train,
            l_adv: l.l_adv,
            l_total: l.l_total,
            l_student: Some(ls),
            teacher_hash: teacher.fingerprint(),
            student_hash: Some(student.fingerprint()),
        });
    }
    Ok(SkdOutcome {
        teacher,
        student,
        report,
    })
}
