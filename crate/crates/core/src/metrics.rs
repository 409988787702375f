//! AUC, group AUC and log loss.
//!
//! GAUC here is the impression-weighted mean of per-group AUC over groups
//! that contain both a click and a non-click. Groups with a single class
//! are dropped from both the numerator and the denominator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores are clipped into `[PROB_CLIP, 1 - PROB_CLIP]` before taking logs.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub label: u8,
    pub score: f64,
    pub group: u64,
}

impl EvalRecord {
    pub fn new(label: u8, score: f64, group: u64) -> Self {
        Self {
            label,
            score,
            group,
        }
    }
}

/// Area under the ROC curve via a sorted rank sum; tied scores count one
/// half. The numerator is accumulated exactly in half-pair units.
pub fn auc(records: &[EvalRecord]) -> Result<f64> {
    let (half_pairs, pos, neg) = auc_counts(records.iter())?;
    Ok(half_pairs as f64 / (2 * pos * neg) as f64)
}

fn auc_counts<'a>(records: impl Iterator<Item = &'a EvalRecord>) -> Result<(u128, u128, u128)> {
    let mut sorted: Vec<(f64, bool)> = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(Error::NonFinite("auc score".into()));
        }
        sorted.push((r.score, r.label != 0));
    }
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut half_pairs: u128 = 0;
    let (mut neg_below, mut pos_total) = (0u128, 0u128);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        half_pairs += 2 * p * neg_below + p * n;
        neg_below += n;
        pos_total += p;
        i = j;
    }
    if pos_total == 0 || neg_below == 0 {
        return Err(Error::SingleClass("auc needs both positive and negative labels"));
    }
    Ok((half_pairs, pos_total, neg_below))
}

/// Impression-weighted mean of per-group AUC.
pub fn gauc(records: &[EvalRecord]) -> Result<f64> {
    let mut groups: BTreeMap<u64, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.group).or_default().push(*r);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for members in groups.values() {
        let has_pos = members.iter().any(|r| r.label != 0);
        let has_neg = members.iter().any(|r| r.label == 0);
        if !(has_pos && has_neg) {
            continue;
        }
        let w = members.len() as f64;
        num += w * auc(members)?;
        den += w;
    }
    if den == 0.0 {
        return Err(Error::SingleClass("gauc needs a group with both classes"));
    }
    Ok(num / den)
}

pub fn clip_prob(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Mean binary cross-entropy of clipped scores.
pub fn logloss(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let total: f64 = records
        .iter()
        .map(|r| {
            let p = clip_prob(r.score);
            if r.label != 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / records.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub auc: f64,
    pub gauc: f64,
    pub logloss: f64,
}

/// All three metrics at once. A metric that is undefined on `records`
/// (single class) is reported as NaN.
pub fn summarize(records: &[EvalRecord]) -> EvalSummary {
    EvalSummary {
        auc: auc(records).unwrap_or(f64::NAN),
        gauc: gauc(records).unwrap_or(f64::NAN),
        logloss: logloss(records),
    }
}
