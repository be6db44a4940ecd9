//! Mechanical rewrite audit: edit similarity, boundary-removal ratio, answer
//! and marker preservation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::eval::{extract_boxed_answer, normalize_answer};
use crate::steering::ContrastivePair;

/// Character-level Levenshtein distance (two-row dynamic program).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            curr[j + 1] = (prev[j + 1] + 1).min(curr[j] + 1).min(prev[j] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// `1 - distance / max(len)` over characters; 1.0 when both strings are empty.
pub fn edit_similarity(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / max_len as f64
}

/// All `<<...>>` spans in order of appearance (markers do not nest).
pub fn extract_markers(text: &str) -> Vec<String> {
    let mut markers = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("<<") {
        let after = &rest[start + 2..];
        match after.find(">>") {
            Some(end) => {
                markers.push(format!("<<{}>>", &after[..end]));
                rest = &after[end + 2..];
            }
            None => break,
        }
    }
    markers
}

fn marker_counts(text: &str) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for m in extract_markers(text) {
        *counts.entry(m).or_insert(0) += 1;
    }
    counts
}

/// Structural comparison of a pair's negative and positive solutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub steps_neg: f64,
    pub steps_pos: f64,
    pub density_neg: f64,
    pub density_pos: f64,
    /// Normalized character-level Levenshtein similarity in [0, 1].
    pub edit_similarity: f64,
    /// Fraction of the negative's step boundaries removed by the rewrite:
    /// `(steps_neg - steps_pos) / max(steps_neg - 1, 1)`, clamped into [0, 1].
    pub adjacent_merge_ratio: f64,
    /// Normalized boxed answers agree (both may be absent).
    pub answer_preserved: bool,
    /// Every `<<...>>` marker occurrence of the negative appears in the
    /// positive at least as often.
    pub markers_preserved: bool,
}

/// Audit one contrastive pair. Densities fall back to zero for empty sides.
pub fn audit(pair: &ContrastivePair) -> AuditReport {
    let steps_neg = pair.negative.n_steps();
    let steps_pos = pair.positive.n_steps();
    let density_of = |steps: usize, tokens: usize| {
        if steps == 0 {
            0.0
        } else {
            tokens as f64 / steps as f64
        }
    };

    let raw_ratio =
        (steps_neg as f64 - steps_pos as f64) / (steps_neg.saturating_sub(1).max(1)) as f64;

    let answer_neg = extract_boxed_answer(&pair.negative.solution).map(|a| normalize_answer(&a));
    let answer_pos = extract_boxed_answer(&pair.positive.solution).map(|a| normalize_answer(&a));

    let neg_markers = marker_counts(&pair.negative.solution);
    let pos_markers = marker_counts(&pair.positive.solution);
    let markers_preserved = neg_markers
        .iter()
        .all(|(m, &count)| pos_markers.get(m).copied().unwrap_or(0) >= count);

    AuditReport {
        steps_neg: steps_neg as f64,
        steps_pos: steps_pos as f64,
        density_neg: density_of(steps_neg, pair.negative.n_tokens()),
        density_pos: density_of(steps_pos, pair.positive.n_tokens()),
        edit_similarity: edit_similarity(&pair.negative.solution, &pair.positive.solution),
        adjacent_merge_ratio: raw_ratio.clamp(0.0, 1.0),
        answer_preserved: answer_neg == answer_pos,
        markers_preserved,
    }
}

/// Collapse whitespace runs to single spaces and trim. Conservative
/// rewriters leave solutions equal under this normalization.
pub fn normalized_content(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
