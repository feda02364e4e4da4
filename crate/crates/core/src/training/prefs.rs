//! Minimal-edit preference pairs and the DPO objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::DpoRecord;
use crate::tensor::kernels;

/// Unit-cost edit distance over arbitrary token sequences, in
/// `O(|a|·|b|)` time and `O(|b|)` memory.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Whitespace-separated words; the unit of "minimal" edits.
pub fn edit_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// `(distance, distance / max(len_a, len_b))` over [`edit_tokens`].
pub fn edit_distance(a: &str, b: &str) -> (usize, f32) {
    let (ta, tb) = (edit_tokens(a), edit_tokens(b));
    let d = levenshtein(&ta, &tb);
    let denom = ta.len().max(tb.len());
    let norm = if denom == 0 { 0.0 } else { d as f32 / denom as f32 };
    (d, norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub image: String,
    pub chosen: String,
    pub rejected: String,
    pub edit_distance: usize,
    pub normalized_distance: f32,
}

/// Why a record did not become a training pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Rejection {
    pub index: usize,
    pub reason: String,
    pub normalized_distance: Option<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairReport {
    pub admitted: Vec<PreferencePair>,
    pub rejected: Vec<Rejection>,
}

/// Turns (original, edited) records into pairs with `chosen = edited`,
/// `rejected = original`, keeping those whose normalized distance is at
/// most `tau`.
pub fn build_pairs(records: &[DpoRecord], tau: f32) -> Result<PairReport> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    let mut report = PairReport::default();
    for (index, r) in records.iter().enumerate() {
        if r.original == r.edited {
            log::warn!("record {index}: original and edited text are identical");
            report.rejected.push(Rejection {
                index,
                reason: "original equals edited".into(),
                normalized_distance: None,
            });
            continue;
        }
        if r.edited.trim().is_empty() || r.original.trim().is_empty() {
            log::warn!("record {index}: empty text");
            report.rejected.push(Rejection {
                index,
                reason: "empty text".into(),
                normalized_distance: None,
            });
            continue;
        }
        let (d, norm) = edit_distance(&r.edited, &r.original);
        if norm > tau {
            report.rejected.push(Rejection {
                index,
                reason: format!("normalized distance {norm:.4} exceeds tau {tau}"),
                normalized_distance: Some(norm),
            });
            continue;
        }
        report.admitted.push(PreferencePair {
            prompt: r.prompt.clone(),
            image: r.image.clone(),
            chosen: r.edited.clone(),
            rejected: r.original.clone(),
            edit_distance: d,
            normalized_distance: norm,
        });
    }
    Ok(report)
}

/// `β · [(π_c − ref_c) − (π_r − ref_r)]` from sequence log-probabilities.
pub fn dpo_margin(policy_chosen: f64, policy_rejected: f64, ref_chosen: f64, ref_rejected: f64, beta: f64) -> f64 {
    beta * ((policy_chosen - ref_chosen) - (policy_rejected - ref_rejected))
}

/// `−log σ(margin)`.
pub fn dpo_loss_from_margin(margin: f64) -> f64 {
    -kernels::log_sigmoid(margin)
}
