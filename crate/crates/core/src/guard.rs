//! Context-conditioned guard classifier: feature layout, a tanh MLP with a
//! two-logit softmax head, the CE/KL losses and exact reverse-mode gradients.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingVector, Encoder};
use crate::error::{Error, Result};
use crate::kb::{ContextSet, EntryResolver};
use crate::par::{map_ranges, ExecMode};
use crate::types::{sha256_hex, Label};

/// Probability floor applied before every logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Examples per gradient work unit. Fixed so that reductions do not depend
/// on the thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GuardCapacity {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub role: Role,
}

impl GuardCapacity {
    pub fn teacher() -> Self {
        GuardCapacity {
            hidden_layers: 2,
            hidden_width: 256,
            role: Role::Teacher,
        }
    }

    pub fn student() -> Self {
        GuardCapacity {
            hidden_layers: 1,
            hidden_width: 64,
            role: Role::Student,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::Shape(format!(
                "capacity needs at least one nonempty hidden layer, got {}x{}",
                self.hidden_layers, self.hidden_width
            )));
        }
        Ok(())
    }
}

/// Query embedding followed by `k` context slots of
/// (embedding, label one-hot, similarity score).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub dimension: usize,
    pub k: usize,
}

impl FeatureLayout {
    pub fn new(dimension: usize, k: usize) -> Self {
        FeatureLayout { dimension, k }
    }

    pub fn slot_len(&self) -> usize {
        self.dimension + 3
    }

    pub fn input_len(&self) -> usize {
        self.dimension + self.k * self.slot_len()
    }

    pub fn slot_offset(&self, slot: usize) -> usize {
        self.dimension + slot * self.slot_len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One resolved context slot.
#[derive(Debug, Clone, Copy)]
pub struct SlotInput<'a> {
    pub embedding: &'a EmbeddingVector,
    pub label: Label,
    pub score: f64,
}

/// Writes the fixed layout; slots beyond `slots.len()` stay zero.
pub fn assemble_features(
    layout: FeatureLayout,
    query: &EmbeddingVector,
    slots: &[SlotInput<'_>],
) -> Result<FeatureVector> {
    if query.dim() != layout.dimension {
        return Err(Error::Shape(format!(
            "query embedding has {} dims, layout expects {}",
            query.dim(),
            layout.dimension
        )));
    }
    let mut v = vec![0.0; layout.input_len()];
    for (dst, src) in v.iter_mut().zip(&query.values) {
        *dst = *src as f64;
    }
    for (i, slot) in slots.iter().take(layout.k).enumerate() {
        if slot.embedding.dim() != layout.dimension {
            return Err(Error::Shape("context embedding dimension".into()));
        }
        let off = layout.slot_offset(i);
        for (j, x) in slot.embedding.values.iter().enumerate() {
            v[off + j] = *x as f64;
        }
        v[off + layout.dimension + slot.label.index()] = 1.0;
        v[off + layout.dimension + 2] = slot.score;
    }
    Ok(FeatureVector(v))
}

/// Canonical text form of a query with its context, one line per slot.
pub fn render_prompt<'a, I>(x: &str, slots: I) -> String
where
    I: IntoIterator<Item = (&'a str, Label, f64)>,
{
    let mut s = format!("QUERY: {x}");
    for (i, (text, label, score)) in slots.into_iter().enumerate() {
        let _ = write!(s, "\nCTX{} [{}] (sim={:.4}): {}", i + 1, label, score, text);
    }
    s
}

/// Builds the feature vector and canonical prompt for `x` with retrieved context.
pub fn build_input(
    x: &str,
    ctx: &ContextSet,
    resolver: &dyn EntryResolver,
    encoder: &Encoder,
    layout: FeatureLayout,
) -> Result<(FeatureVector, String)> {
    let query = encoder.embed(x);
    let mut entries = Vec::with_capacity(ctx.len().min(layout.k));
    for item in ctx.items.iter().take(layout.k) {
        let e = resolver
            .resolve(item.entry_id)
            .ok_or(Error::DanglingEntry(item.entry_id))?;
        entries.push((e, item.score));
    }
    let slots: Vec<SlotInput<'_>> = entries
        .iter()
        .map(|(e, score)| SlotInput {
            embedding: &e.embedding,
            label: e.label,
            score: *score,
        })
        .collect();
    let features = assemble_features(layout, &query, &slots)?;
    let prompt = render_prompt(
        x,
        entries.iter().map(|(e, score)| (e.text.as_str(), e.label, *score)),
    );
    Ok((features, prompt))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionDistribution {
    pub p_safe: f64,
    pub p_unsafe: f64,
}

impl PredictionDistribution {
    pub fn new(p_safe: f64, p_unsafe: f64) -> Self {
        PredictionDistribution { p_safe, p_unsafe }
    }

    /// Numerically stable two-way softmax.
    pub fn from_logits(z: [f64; 2]) -> Self {
        let m = z[0].max(z[1]);
        let a = (z[0] - m).exp();
        let b = (z[1] - m).exp();
        let s = a + b;
        PredictionDistribution {
            p_safe: a / s,
            p_unsafe: b / s,
        }
    }

    pub fn prob(&self, label: Label) -> f64 {
        match label {
            Label::Safe => self.p_safe,
            Label::Unsafe => self.p_unsafe,
        }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.p_safe, self.p_unsafe]
    }

    /// Argmax; exact ties go to safe.
    pub fn label(&self) -> Label {
        if self.p_unsafe > self.p_safe {
            Label::Unsafe
        } else {
            Label::Safe
        }
    }
}

pub fn cross_entropy(dist: &PredictionDistribution, y: Label) -> f64 {
    -dist.prob(y).max(LOG_CLAMP).ln()
}

/// KL(p ‖ q) with q clamped at [`LOG_CLAMP`] and 0·ln 0 = 0.
pub fn kl_divergence(p: &PredictionDistribution, q: &PredictionDistribution) -> f64 {
    p.as_array()
        .iter()
        .zip(q.as_array())
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(LOG_CLAMP)).ln())
        .sum()
}

/// Weights of the distillation objective. Weights need not sum to one at
/// this level; the training module enforces that.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossMix {
    pub kl: f64,
    pub ce: f64,
    /// Expected 0-1 error term `1 − p[y]`.
    pub reward: f64,
}

impl Default for LossMix {
    fn default() -> Self {
        LossMix {
            kl: 0.6,
            ce: 0.4,
            reward: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Cross-entropy against a hard label.
    Hard(Label),
    /// `kl·KL(teacher ‖ p) + ce·CE(p, label) + reward·(1 − p[label])`.
    Distill {
        teacher: PredictionDistribution,
        label: Label,
        mix: LossMix,
    },
}

impl Target {
    pub fn loss(&self, p: &PredictionDistribution) -> f64 {
        match *self {
            Target::Hard(y) => cross_entropy(p, y),
            Target::Distill {
                teacher,
                label,
                mix,
            } => {
                let mut l = 0.0;
                if mix.kl != 0.0 {
                    l += mix.kl * kl_divergence(&teacher, p);
                }
                if mix.ce != 0.0 {
                    l += mix.ce * cross_entropy(p, label);
                }
                if mix.reward != 0.0 {
                    l += mix.reward * (1.0 - p.prob(label));
                }
                l
            }
        }
    }

    /// d loss / d logits.
    pub fn logit_grad(&self, p: &PredictionDistribution) -> [f64; 2] {
        let pa = p.as_array();
        let ce_grad = |y: Label| -> [f64; 2] {
            if pa[y.index()] < LOG_CLAMP {
                return [0.0, 0.0];
            }
            let mut g = pa;
            g[y.index()] -= 1.0;
            g
        };
        match *self {
            Target::Hard(y) => ce_grad(y),
            Target::Distill {
                teacher,
                label,
                mix,
            } => {
                let mut g = [0.0; 2];
                if mix.kl != 0.0 {
                    // d/dz of −Σ t_i ln q_i over unclamped coordinates.
                    let t = teacher.as_array();
                    let mut live = 0.0;
                    for i in 0..2 {
                        if t[i] > 0.0 && pa[i] >= LOG_CLAMP {
                            live += t[i];
                        }
                    }
                    for j in 0..2 {
                        let own = if t[j] > 0.0 && pa[j] >= LOG_CLAMP {
                            t[j]
                        } else {
                            0.0
                        };
                        g[j] += mix.kl * (live * pa[j] - own);
                    }
                }
                if mix.ce != 0.0 {
                    let c = ce_grad(label);
                    g[0] += mix.ce * c[0];
                    g[1] += mix.ce * c[1];
                }
                if mix.reward != 0.0 {
                    let py = pa[label.index()];
                    for j in 0..2 {
                        let delta = if j == label.index() { 1.0 } else { 0.0 };
                        g[j] += mix.reward * (-py * (delta - pa[j]));
                    }
                }
                g
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    /// Offset of the input-major weight block; biases follow it.
    offset: usize,
}

impl LayerShape {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    fn bias(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }
}

/// All weights of one classifier instance, flattened. Each layer stores an
/// `inputs × outputs` weight block (row per input) followed by its biases.
#[derive(Debug, Clone, PartialEq)]
pub struct GuardParams {
    pub capacity: GuardCapacity,
    pub layout: FeatureLayout,
    pub seed: u64,
    layers: Vec<LayerShape>,
    data: Vec<f64>,
}

fn layer_shapes(capacity: GuardCapacity, layout: FeatureLayout) -> (Vec<LayerShape>, usize) {
    let mut dims = vec![layout.input_len()];
    dims.extend(std::iter::repeat(capacity.hidden_width).take(capacity.hidden_layers));
    dims.push(2);
    let mut offset = 0;
    let layers = dims
        .windows(2)
        .map(|w| {
            let shape = LayerShape {
                inputs: w[0],
                outputs: w[1],
                offset,
            };
            offset += w[0] * w[1] + w[1];
            shape
        })
        .collect();
    (layers, offset)
}

impl GuardParams {
    /// Uniform ±1/√fan_in initialization from a seeded stream.
    pub fn init(capacity: GuardCapacity, layout: FeatureLayout, seed: u64) -> Result<Self> {
        capacity.validate()?;
        let (layers, total) = layer_shapes(capacity, layout);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; total];
        for l in &layers {
            let bound = 1.0 / (l.inputs as f64).sqrt();
            for w in &mut data[l.offset..l.bias().end] {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        Ok(GuardParams {
            capacity,
            layout,
            seed,
            layers,
            data,
        })
    }

    pub fn zeros(capacity: GuardCapacity, layout: FeatureLayout) -> Result<Self> {
        capacity.validate()?;
        let (layers, total) = layer_shapes(capacity, layout);
        Ok(GuardParams {
            capacity,
            layout,
            seed: 0,
            layers,
            data: vec![0.0; total],
        })
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Hex SHA-256 over the little-endian parameter bytes.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        sha256_hex(&bytes)
    }

    /// Range of the output-layer biases (safe, unsafe).
    pub fn output_bias_range(&self) -> std::ops::Range<usize> {
        self.layers.last().expect("at least one layer").bias()
    }

    fn check_input(&self, features: &FeatureVector) -> Result<()> {
        if features.len() != self.layout.input_len() {
            return Err(Error::Shape(format!(
                "feature length {} != expected {}",
                features.len(),
                self.layout.input_len()
            )));
        }
        Ok(())
    }

    /// Activations of every layer; the last entry holds the logits.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let n = self.layers.len();
        for (li, l) in self.layers.iter().enumerate() {
            let input: &[f64] = if li == 0 { x } else { &acts[li - 1] };
            let w = &self.data[l.weights()];
            let mut out = self.data[l.bias()].to_vec();
            for (i, &a) in input.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &w[i * l.outputs..(i + 1) * l.outputs];
                for (o, wv) in out.iter_mut().zip(row) {
                    *o += a * wv;
                }
            }
            if li + 1 < n {
                for o in &mut out {
                    *o = o.tanh();
                }
            }
            acts.push(out);
        }
        acts
    }

    pub fn logits(&self, features: &FeatureVector) -> Result<[f64; 2]> {
        self.check_input(features)?;
        let acts = self.activations(&features.0);
        let z = acts.last().expect("output layer");
        Ok([z[0], z[1]])
    }

    pub fn forward(&self, features: &FeatureVector) -> Result<PredictionDistribution> {
        Ok(PredictionDistribution::from_logits(self.logits(features)?))
    }

    /// Adds `weight · ∇loss` for one example into `grad`, returning the
    /// unweighted loss.
    fn accumulate(&self, x: &[f64], target: &Target, weight: f64, grad: &mut [f64]) -> f64 {
        let acts = self.activations(x);
        let z = acts.last().expect("output layer");
        let p = PredictionDistribution::from_logits([z[0], z[1]]);
        let loss = target.loss(&p);
        let g = target.logit_grad(&p);
        let mut delta = vec![weight * g[0], weight * g[1]];
        for li in (0..self.layers.len()).rev() {
            let l = self.layers[li];
            let input: &[f64] = if li == 0 { x } else { &acts[li - 1] };
            for (gb, d) in grad[l.bias()].iter_mut().zip(&delta) {
                *gb += d;
            }
            let wrange = l.weights();
            for (i, &a) in input.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &mut grad[wrange.start + i * l.outputs..wrange.start + (i + 1) * l.outputs];
                for (gw, d) in row.iter_mut().zip(&delta) {
                    *gw += a * d;
                }
            }
            if li == 0 {
                break;
            }
            let w = &self.data[wrange];
            let mut prev = vec![0.0; l.inputs];
            for (i, p) in prev.iter_mut().enumerate() {
                let row = &w[i * l.outputs..(i + 1) * l.outputs];
                let mut s = 0.0;
                for (wv, d) in row.iter().zip(&delta) {
                    s += wv * d;
                }
                let a = input[i];
                *p = s * (1.0 - a * a);
            }
            delta = prev;
        }
        loss
    }
}

/// One weighted term of an objective.
#[derive(Debug, Clone, Copy)]
pub struct WeightedExample<'a> {
    pub features: &'a FeatureVector,
    pub target: Target,
    pub weight: f64,
}

/// Σ wᵢ·ℓᵢ and its exact gradient, reduced in fixed chunk order.
pub fn weighted_gradients(
    params: &GuardParams,
    batch: &[WeightedExample<'_>],
    mode: ExecMode,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for ex in batch {
        params.check_input(ex.features)?;
    }
    let n = params.num_params();
    let partials = map_ranges(mode, batch.len(), GRAD_CHUNK, |range| {
        let mut grad = vec![0.0; n];
        let mut loss = 0.0;
        for i in range {
            let ex = &batch[i];
            let l = params.accumulate(&ex.features.0, &ex.target, ex.weight, &mut grad);
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { index: i });
            }
            loss += ex.weight * l;
        }
        Ok((loss, grad))
    });
    let mut total = 0.0;
    let mut grad = vec![0.0; n];
    for part in partials {
        let (l, g) = part?;
        total += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, grad))
}

/// Mean loss over the batch and its exact gradient.
pub fn gradients(
    params: &GuardParams,
    batch: &[(&FeatureVector, Target)],
    mode: ExecMode,
) -> Result<(f64, Vec<f64>)> {
    let w = 1.0 / batch.len().max(1) as f64;
    let weighted: Vec<WeightedExample<'_>> = batch
        .iter()
        .map(|(f, t)| WeightedExample {
            features: f,
            target: *t,
            weight: w,
        })
        .collect();
    weighted_gradients(params, &weighted, mode)
}

/// Loss without gradient, same reduction order as [`weighted_gradients`].
pub fn weighted_loss(
    params: &GuardParams,
    batch: &[WeightedExample<'_>],
    mode: ExecMode,
) -> Result<f64> {
    for ex in batch {
        params.check_input(ex.features)?;
    }
    let partials = map_ranges(mode, batch.len(), GRAD_CHUNK, |range| {
        let mut loss = 0.0;
        for i in range {
            let ex = &batch[i];
            let acts = params.activations(&ex.features.0);
            let z = acts.last().expect("output layer");
            let l = ex.target.loss(&PredictionDistribution::from_logits([z[0], z[1]]));
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { index: i });
            }
            loss += ex.weight * l;
        }
        Ok(loss)
    });
    let mut total = 0.0;
    for p in partials {
        total += p?;
    }
    Ok(total)
}

/// Forward pass over many feature vectors.
pub fn predict_batch(
    params: &GuardParams,
    features: &[&FeatureVector],
    mode: ExecMode,
) -> Result<Vec<PredictionDistribution>> {
    let out = crate::par::map_items(mode, features, |f| params.forward(f));
    out.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { momentum: 0.0 }
    }
}

/// SGD with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: OptimizerConfig,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(cfg: OptimizerConfig, num_params: usize) -> Self {
        Sgd {
            cfg,
            velocity: if cfg.momentum != 0.0 {
                vec![0.0; num_params]
            } else {
                Vec::new()
            },
        }
    }

    /// `p ← p − lr·g` (or `v ← μv + g; p ← p − lr·v`). Leaves `params`
    /// untouched if any updated value would be non-finite.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::Shape(format!(
                "gradient length {} != params {}",
                grad.len(),
                params.len()
            )));
        }
        if self.cfg.momentum == 0.0 {
            let next: Vec<f64> = params.iter().zip(grad).map(|(p, g)| p - lr * g).collect();
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteUpdate);
            }
            params.copy_from_slice(&next);
            return Ok(());
        }
        let mu = self.cfg.momentum;
        let vel: Vec<f64> = self
            .velocity
            .iter()
            .zip(grad)
            .map(|(v, g)| mu * v + g)
            .collect();
        let next: Vec<f64> = params.iter().zip(&vel).map(|(p, v)| p - lr * v).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteUpdate);
        }
        self.velocity = vel;
        params.copy_from_slice(&next);
        Ok(())
    }
}

/// Applies one optimizer step to `params`.
pub fn apply_update(params: &mut GuardParams, grad: &[f64], opt: &mut Sgd, lr: f64) -> Result<()> {
    opt.step(&mut params.data, grad, lr)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ADRG";
const CHECKPOINT_VERSION: u32 = 1;

impl GuardParams {
    /// Binary checkpoint: header (capacity, layout, seed) then f64 LE values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.data.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(match self.capacity.role {
            Role::Teacher => 0,
            Role::Student => 1,
        });
        for v in [
            self.capacity.hidden_layers,
            self.capacity.hidden_width,
            self.layout.dimension,
            self.layout.k,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.data.len() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated checkpoint"));
            }
            let (h, t) = cur.split_at(n);
            cur = t;
            Ok(h)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad("unsupported checkpoint version"));
        }
        let role = match take(1)?[0] {
            0 => Role::Teacher,
            1 => Role::Student,
            _ => return Err(bad("bad role byte")),
        };
        let mut u = || -> Result<u64> { Ok(u64::from_le_bytes(take(8)?.try_into().unwrap())) };
        let hidden_layers = u()? as usize;
        let hidden_width = u()? as usize;
        let dimension = u()? as usize;
        let k = u()? as usize;
        let seed = u()?;
        let n = u()? as usize;
        let capacity = GuardCapacity {
            hidden_layers,
            hidden_width,
            role,
        };
        let layout = FeatureLayout { dimension, k };
        let mut params = GuardParams::zeros(capacity, layout)?;
        params.seed = seed;
        if n != params.num_params() {
            return Err(bad("parameter count does not match header shape"));
        }
        if cur.len() != n * 8 {
            return Err(bad("payload length mismatch"));
        }
        for (dst, chunk) in params.data.iter_mut().zip(cur.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(params)
    }

    /// Writes the binary checkpoint and a `.json` sidecar with `metadata`.
    pub fn save(&self, path: impl AsRef<Path>, metadata: &serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let sidecar = path.with_extension("json");
        let meta = serde_json::json!({
            "capacity": self.capacity,
            "layout": self.layout,
            "seed": self.seed,
            "num_params": self.num_params(),
            "fingerprint": self.fingerprint(),
            "training": metadata,
        });
        fs::write(&sidecar, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::kb::{ContextItem, KnowledgeBase, NewEntry};

    fn small_layout() -> FeatureLayout {
        FeatureLayout::new(4, 2)
    }

    #[test]
    fn layout_sizes() {
        let l = FeatureLayout::new(64, 5);
        assert_eq!(l.input_len(), 64 + 5 * 67);
        let t = GuardParams::init(GuardCapacity::teacher(), l, 1).unwrap();
        let s = GuardParams::init(GuardCapacity::student(), l, 1).unwrap();
        assert!((s.num_params() as f64) <= 0.3 * t.num_params() as f64);
    }

    #[test]
    fn softmax_examples() {
        let p = PredictionDistribution::from_logits([3f64.ln(), 0.0]);
        assert!((p.p_safe - 0.75).abs() < 1e-15);
        assert!((p.p_unsafe - 0.25).abs() < 1e-15);
        for z in [-700.0, 0.0, 3.5, 900.0] {
            let p = PredictionDistribution::from_logits([z, z]);
            assert_eq!((p.p_safe, p.p_unsafe), (0.5, 0.5));
        }
        let zero = GuardParams::zeros(GuardCapacity::student(), small_layout()).unwrap();
        let f = FeatureVector(vec![0.3; small_layout().input_len()]);
        let p = zero.forward(&f).unwrap();
        assert_eq!((p.p_safe, p.p_unsafe), (0.5, 0.5));
    }

    #[test]
    fn loss_examples() {
        let d = |p: f64| PredictionDistribution::new(1.0 - p, p);
        assert_eq!(cross_entropy(&d(1.0), Label::Unsafe), 0.0);
        assert!((cross_entropy(&d(0.5), Label::Unsafe) - 0.693147).abs() < 1e-6);
        assert!((cross_entropy(&d(0.25), Label::Unsafe) - 1.386294).abs() < 1e-6);
        assert!(cross_entropy(&d(0.0), Label::Unsafe).is_finite());
        let p = PredictionDistribution::new(0.5, 0.5);
        let q = PredictionDistribution::new(0.25, 0.75);
        assert_eq!(kl_divergence(&p, &p), 0.0);
        assert!((kl_divergence(&p, &q) - 0.143841).abs() < 1e-6);
        let onehot = PredictionDistribution::new(0.0, 1.0);
        assert!(kl_divergence(&onehot, &q).is_finite());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = GuardParams::init(GuardCapacity::student(), small_layout(), 0).unwrap();
        assert!(p.forward(&FeatureVector(vec![0.0; 3])).is_err());
        assert!(matches!(
            gradients(&p, &[], ExecMode::Sequential),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn build_input_layout_and_prompt() {
        let kb = KnowledgeBase::new(EncoderConfig::default()).unwrap();
        let id = kb.insert(NewEntry::new("how to hotwire a car", Label::Unsafe)).unwrap();
        kb.publish_snapshot();
        let snap = kb.snapshot();
        let layout = FeatureLayout::new(64, 2);
        let (empty, prompt) =
            build_input("q", &ContextSet::empty(2), snap.as_ref(), snap.encoder(), layout).unwrap();
        assert_eq!(prompt, "QUERY: q");
        assert!(empty.0[64..].iter().all(|v| *v == 0.0));
        let q_emb = snap.encoder().embed("q");
        assert!(empty.0[..64].iter().zip(&q_emb.values).all(|(a, b)| *a == *b as f64));

        let ctx = ContextSet {
            items: vec![ContextItem {
                entry_id: id,
                score: 0.87654,
            }],
            k_requested: 2,
        };
        let (f, prompt) = build_input("hotwire car", &ctx, snap.as_ref(), snap.encoder(), layout).unwrap();
        let (f2, _) = build_input("hotwire car", &ctx, snap.as_ref(), snap.encoder(), layout).unwrap();
        assert_eq!(f, f2);
        assert_eq!(
            prompt,
            "QUERY: hotwire car\nCTX1 [unsafe] (sim=0.8765): how to hotwire a car"
        );
        let slot0 = layout.slot_offset(0);
        assert_eq!(f.0[slot0 + 64], 0.0);
        assert_eq!(f.0[slot0 + 65], 1.0);
        assert_eq!(f.0[slot0 + 66], 0.87654);
        assert!(f.0[layout.slot_offset(1)..].iter().all(|v| *v == 0.0));

        let dangling = ContextSet {
            items: vec![ContextItem {
                entry_id: 99,
                score: 1.0,
            }],
            k_requested: 2,
        };
        assert!(matches!(
            build_input("x", &dangling, snap.as_ref(), snap.encoder(), layout),
            Err(Error::DanglingEntry(99))
        ));
    }

    #[test]
    fn sgd_examples() {
        let mut w = vec![1.0];
        let mut opt = Sgd::new(OptimizerConfig::default(), 1);
        let grad = vec![2.0 * w[0]];
        opt.step(&mut w, &grad, 0.1).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15);

        let mut p = GuardParams::init(GuardCapacity::student(), small_layout(), 3).unwrap();
        let before = p.clone();
        let g = vec![1.5; p.num_params()];
        apply_update(&mut p, &g, &mut Sgd::new(OptimizerConfig::default(), 0), 0.0).unwrap();
        assert_eq!(p, before);

        let mut a = vec![0.3, -0.2];
        let mut b = a.clone();
        let g = [0.5, -1.25];
        let mut opt = Sgd::new(OptimizerConfig::default(), 2);
        opt.step(&mut a, &g, 0.05).unwrap();
        opt.step(&mut a, &g, 0.05).unwrap();
        opt.step(&mut b, &g, 0.1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }

        let mut q = vec![1.0];
        assert!(matches!(
            Sgd::new(OptimizerConfig::default(), 1).step(&mut q, &[f64::INFINITY], 1.0),
            Err(Error::NonFiniteUpdate)
        ));
        assert_eq!(q, vec![1.0]);
    }

    #[test]
    fn stationary_point_has_zero_bias_difference() {
        let layout = small_layout();
        let p = GuardParams::zeros(GuardCapacity::student(), layout).unwrap();
        let f = FeatureVector(vec![0.5; layout.input_len()]);
        let batch = vec![(&f, Target::Hard(Label::Safe)), (&f, Target::Hard(Label::Unsafe))];
        let (_, g) = gradients(&p, &batch, ExecMode::Sequential).unwrap();
        let b = p.output_bias_range();
        assert_eq!(g[b.start] - g[b.start + 1], 0.0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("student.bin");
        let p = GuardParams::init(GuardCapacity::student(), FeatureLayout::new(8, 3), 11).unwrap();
        p.save(&path, &serde_json::json!({"epochs": 3})).unwrap();
        let q = GuardParams::load(&path).unwrap();
        assert_eq!(p, q);
        assert!(dir.path().join("student.json").exists());
        let bytes = p.to_bytes();
        assert!(GuardParams::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
