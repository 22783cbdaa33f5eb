//! Classification metrics and retrieval diagnostics.

use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::guard::{build_input, FeatureVector, GuardParams};
use crate::kb::{ContextSet, KbSnapshot};
use crate::par::{map_items, ExecMode};
use crate::types::Label;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n: u64,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub safe: ClassMetrics,
    pub r#unsafe: ClassMetrics,
    /// `confusion[truth][predicted]`, indexed safe = 0, unsafe = 1.
    pub confusion: [[u64; 2]; 2],
}

impl EvalMetrics {
    pub fn class(&self, label: Label) -> &ClassMetrics {
        match label {
            Label::Safe => &self.safe,
            Label::Unsafe => &self.r#unsafe,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics from a confusion matrix. Undefined precision/recall/F1 are 0.
pub fn metrics_from_confusion(confusion: [[u64; 2]; 2]) -> EvalMetrics {
    let n: u64 = confusion.iter().flatten().sum();
    let class = |c: usize| {
        let tp = confusion[c][c];
        let predicted = confusion[0][c] + confusion[1][c];
        let support = confusion[c][0] + confusion[c][1];
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassMetrics {
            precision,
            recall,
            f1,
            support,
        }
    };
    let safe = class(0);
    let unsafe_ = class(1);
    let weighted_f1 = if n == 0 {
        0.0
    } else {
        (safe.support as f64 * safe.f1 + unsafe_.support as f64 * unsafe_.f1) / n as f64
    };
    EvalMetrics {
        n,
        accuracy: ratio(confusion[0][0] + confusion[1][1], n),
        weighted_f1,
        safe,
        r#unsafe: unsafe_,
        confusion,
    }
}

pub fn metrics_from_predictions(truth: &[Label], predicted: &[Label]) -> EvalMetrics {
    let mut confusion = [[0u64; 2]; 2];
    for (t, p) in truth.iter().zip(predicted) {
        confusion[t.index()][p.index()] += 1;
    }
    metrics_from_confusion(confusion)
}

/// Retrieves top-K at `1 − epsilon` for each query and builds its features.
pub fn featurize_queries(
    texts: &[&str],
    snapshot: &KbSnapshot,
    layout: crate::guard::FeatureLayout,
    epsilon: f64,
    mode: ExecMode,
) -> Result<Vec<(ContextSet, FeatureVector)>> {
    let encoder = snapshot.encoder();
    let out = map_items(mode, texts, |x| -> Result<(ContextSet, FeatureVector)> {
        let q = encoder.encode(x);
        let ctx = snapshot.retrieve_topk_encoded(&q, layout.k, epsilon, &[], ExecMode::Sequential)?;
        let (f, _) = build_input(x, &ctx, snapshot, encoder, layout)?;
        Ok((ctx, f))
    });
    out.into_iter().collect()
}

/// Classifies every example with contexts retrieved from `snapshot` at
/// evaluation time.
pub fn evaluate(
    params: &GuardParams,
    data: &[Example],
    snapshot: &KbSnapshot,
    epsilon: f64,
    mode: ExecMode,
) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let texts: Vec<&str> = data.iter().map(|e| e.text.as_str()).collect();
    let feats = featurize_queries(&texts, snapshot, params.layout, epsilon, mode)?;
    let preds = map_items(mode, &feats, |(_, f)| params.forward(f).map(|p| p.label()));
    let preds: Vec<Label> = preds.into_iter().collect::<Result<_>>()?;
    let truth: Vec<Label> = data.iter().map(|e| e.label).collect();
    Ok(metrics_from_predictions(&truth, &preds))
}

/// Label agreement between each query and its nearest retrieved context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextDistribution {
    pub both_safe: f64,
    pub safe_q_unsafe_c: f64,
    pub unsafe_q_safe_c: f64,
    pub both_unsafe: f64,
    pub with_context: u64,
    pub without_context: u64,
}

impl ContextDistribution {
    pub fn mismatch(&self) -> f64 {
        self.safe_q_unsafe_c + self.unsafe_q_safe_c
    }
}

fn top1_labels(
    data: &[Example],
    snapshot: &KbSnapshot,
    min_score: f64,
    mode: ExecMode,
) -> Vec<Option<Label>> {
    let encoder = snapshot.encoder();
    map_items(mode, data, |ex| {
        let q = encoder.encode(&ex.text);
        let ctx = snapshot.retrieve_min_score(&q, 1, min_score, &[], ExecMode::Sequential);
        ctx.items
            .first()
            .and_then(|it| snapshot.get(it.entry_id))
            .map(|e| e.label)
    })
}

/// 2×2 grid of (query label, top-1 context label) over queries whose top
/// context scores at least `threshold`. Fractions are over those queries.
pub fn analyze_context_distribution(
    data: &[Example],
    snapshot: &KbSnapshot,
    threshold: f64,
    mode: ExecMode,
) -> Result<ContextDistribution> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidRetrieval(format!("threshold {threshold} outside [0, 1]")));
    }
    let tops = top1_labels(data, snapshot, threshold, mode);
    let mut grid = [[0u64; 2]; 2];
    let mut without = 0;
    for (ex, top) in data.iter().zip(&tops) {
        match top {
            Some(c) => grid[ex.label.index()][c.index()] += 1,
            None => without += 1,
        }
    }
    let with: u64 = grid.iter().flatten().sum();
    Ok(ContextDistribution {
        both_safe: ratio(grid[0][0], with),
        safe_q_unsafe_c: ratio(grid[0][1], with),
        unsafe_q_safe_c: ratio(grid[1][0], with),
        both_unsafe: ratio(grid[1][1], with),
        with_context: with,
        without_context: without,
    })
}

/// Fraction of queries with at least one context scoring ≥ `threshold`.
/// Any threshold is accepted; −1 admits every entry under cosine.
pub fn context_coverage_ratio(data: &[Example], snapshot: &KbSnapshot, threshold: f64, mode: ExecMode) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let tops = top1_labels(data, snapshot, threshold, mode);
    tops.iter().filter(|t| t.is_some()).count() as f64 / data.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::kb::{KnowledgeBase, NewEntry};

    #[test]
    fn constant_safe_predictor_on_balanced_set() {
        let truth = [Label::Safe, Label::Safe, Label::Unsafe, Label::Unsafe];
        let m = metrics_from_predictions(&truth, &[Label::Safe; 4]);
        assert!((m.safe.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.r#unsafe.f1, 0.0);
        assert_eq!(m.r#unsafe.precision, 0.0);
        assert!((m.weighted_f1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.confusion, [[2, 0], [2, 0]]);
    }

    #[test]
    fn perfect_predictions() {
        let truth = [Label::Safe, Label::Unsafe, Label::Unsafe];
        let m = metrics_from_predictions(&truth, &truth);
        assert_eq!(m.weighted_f1, 1.0);
        assert_eq!(m.accuracy, 1.0);
    }

    fn kb_of(rows: &[(&str, Label)]) -> KnowledgeBase {
        let kb = KnowledgeBase::new(EncoderConfig::default()).unwrap();
        kb.insert_many(rows.iter().map(|(t, l)| NewEntry::new(*t, *l).timestamp(0)))
            .unwrap();
        kb.publish_snapshot();
        kb
    }

    #[test]
    fn self_match_has_no_mismatch() {
        let rows = [
            ("how do i bake bread", Label::Safe),
            ("how do i build a weapon", Label::Unsafe),
            ("recommend a novel", Label::Safe),
        ];
        let kb = kb_of(&rows);
        let data: Vec<Example> = rows.iter().map(|(t, l)| Example::new(*t, *l)).collect();
        let d = analyze_context_distribution(&data, &kb.snapshot(), 0.5, ExecMode::Sequential).unwrap();
        assert_eq!(d.mismatch(), 0.0);
        assert_eq!(d.with_context, 3);
        let sum = d.both_safe + d.both_unsafe + d.mismatch();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn coverage_bounds() {
        let kb = kb_of(&[("alpha beta", Label::Safe)]);
        let data = vec![Example::new("completely different words", Label::Safe)];
        assert_eq!(context_coverage_ratio(&data, &kb.snapshot(), -1.0, ExecMode::Sequential), 1.0);
        let empty = kb_of(&[]);
        assert_eq!(context_coverage_ratio(&data, &empty.snapshot(), -1.0, ExecMode::Sequential), 0.0);
        assert!(analyze_context_distribution(&data, &kb.snapshot(), 1.5, ExecMode::Sequential).is_err());
    }
}
