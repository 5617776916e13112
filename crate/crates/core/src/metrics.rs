//! ROUGE-1/2/L and QA exact-match / token-F1 scoring.
//!
//! Full-length F1 variant with no stemming or stopword handling; token ids
//! compare by equality only.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    const ZERO: RougeScore = RougeScore { precision: 0.0, recall: 0.0, f1: 0.0 };

    fn from_pr(precision: f64, recall: f64) -> RougeScore {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore { precision, recall, f1 }
    }
}

/// N-gram overlap F1 with clipped counts (each reference n-gram credits at
/// most its reference frequency).
pub fn rouge_n(hyp: &[u32], reference: &[u32], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be at least 1");
    if hyp.len() < n || reference.len() < n {
        return RougeScore::ZERO;
    }
    let mut ref_counts: HashMap<&[u32], usize> = HashMap::new();
    for gram in reference.windows(n) {
        *ref_counts.entry(gram).or_insert(0) += 1;
    }
    let mut matched = 0usize;
    for gram in hyp.windows(n) {
        if let Some(c) = ref_counts.get_mut(gram) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    let hyp_total = hyp.len() + 1 - n;
    let ref_total = reference.len() + 1 - n;
    RougeScore::from_pr(matched as f64 / hyp_total as f64, matched as f64 / ref_total as f64)
}

/// Longest-common-subsequence F1.
pub fn rouge_l(hyp: &[u32], reference: &[u32]) -> RougeScore {
    if hyp.is_empty() || reference.is_empty() {
        return RougeScore::ZERO;
    }
    let lcs = lcs_length(hyp, reference);
    RougeScore::from_pr(lcs as f64 / hyp.len() as f64, lcs as f64 / reference.len() as f64)
}

/// Classic O(n·m) dynamic program, rolling rows.
fn lcs_length(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            curr[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(curr[j]) };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Exact match plus token-overlap F1 between two answers given as entity
/// indices into `entity_strings`. EM compares indices; F1 compares the
/// whitespace tokens of the surface strings with clipped counts.
pub fn qa_em_f1(predicted: usize, gold: usize, entity_strings: &[String]) -> (f64, f64) {
    assert!(
        predicted < entity_strings.len() && gold < entity_strings.len(),
        "entity index out of range"
    );
    let em = if predicted == gold { 1.0 } else { 0.0 };
    let p_tokens: Vec<&str> = entity_strings[predicted].split_whitespace().collect();
    let g_tokens: Vec<&str> = entity_strings[gold].split_whitespace().collect();
    if p_tokens.is_empty() || g_tokens.is_empty() {
        return (em, 0.0);
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for t in &g_tokens {
        *gold_counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &p_tokens {
        if let Some(c) = gold_counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let f1 = if overlap == 0 {
        0.0
    } else {
        let p = overlap as f64 / p_tokens.len() as f64;
        let r = overlap as f64 / g_tokens.len() as f64;
        2.0 * p * r / (p + r)
    };
    (em, f1)
}
