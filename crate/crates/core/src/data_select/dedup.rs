use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::similarity::{intra_similarity, ScoredId};
use crate::error::{Error, Result};
use crate::linalg::cmp_values;
use crate::types::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupEntry {
    pub discarded: String,
    pub kept: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupOutcome {
    /// Survivors, best cross-score first, ties by id.
    pub kept: Vec<ScoredId>,
    pub log: Vec<DedupEntry>,
}

/// Semantic deduplication.
///
/// Every pair whose intra-similarity exceeds `tau` is visited in
/// descending similarity order (ties by the sorted id pair). If both
/// members are still alive, the one with the lower cross-score is dropped;
/// equal scores drop the lexicographically larger id. No surviving pair
/// exceeds `tau`, and the result does not depend on input order.
pub fn semdedup(candidates: &EmbeddingMatrix, scores: &[f64], tau: f64) -> Result<DedupOutcome> {
    if scores.len() != candidates.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} candidates",
            scores.len(),
            candidates.len()
        )));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Validation(format!("tau must lie in (0, 1], got {tau}")));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Domain(format!("score for {} is NaN", candidates.ids()[i])));
    }
    let ids = candidates.ids();
    let sim = intra_similarity(candidates);
    let n = ids.len();

    let ordered_pair = |i: usize, j: usize| {
        if ids[i] <= ids[j] {
            (i, j)
        } else {
            (j, i)
        }
    };
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let s = sim.get(i, j);
            if s > tau {
                let (a, b) = ordered_pair(i, j);
                pairs.push((a, b, s));
            }
        }
    }
    pairs.sort_by(|x, y| {
        cmp_values(y.2, x.2)
            .then_with(|| ids[x.0].cmp(&ids[y.0]))
            .then_with(|| ids[x.1].cmp(&ids[y.1]))
    });

    let mut alive = alloc::vec![true; n];
    let mut log = Vec::new();
    for (a, b, s) in pairs {
        if !alive[a] || !alive[b] {
            continue;
        }
        // `a` has the smaller id, so on equal scores `b` goes.
        let (drop, keep) = match cmp_values(scores[a], scores[b]) {
            Ordering::Less => (a, b),
            _ => (b, a),
        };
        alive[drop] = false;
        log.push(DedupEntry {
            discarded: ids[drop].clone(),
            kept: ids[keep].clone(),
            similarity: s,
        });
    }

    let mut kept: Vec<ScoredId> = (0..n)
        .filter(|&i| alive[i])
        .map(|i| ScoredId {
            id: ids[i].clone(),
            score: scores[i],
        })
        .collect();
    kept.sort_by(|x, y| cmp_values(y.score, x.score).then_with(|| x.id.cmp(&y.id)));
    Ok(DedupOutcome { kept, log })
}
