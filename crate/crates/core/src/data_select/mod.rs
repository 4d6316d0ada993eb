//! K-shot guided data selection: similarity-first retrieval of a budget of
//! pool items, followed by semantic deduplication.

mod dedup;
mod hull;
mod kde;
mod similarity;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use dedup::{semdedup, DedupEntry, DedupOutcome};
pub use hull::{convex_hull_sample, ConvexHull, HullFit, HullSample, MAX_ITERATIONS};
pub use kde::{kde_density, kde_sample, weighted_sample_without_replacement, KdeSample};
pub use similarity::{cross_similarity, intra_similarity, select_top_c, ScoredId, SimilarityMatrix};

use crate::error::{Error, Result};
use crate::types::EmbeddingMatrix;

/// Prefix the embedding bridge prepends to every encoded sample.
pub const RETRIEVAL_PREFIX: &str = "Represent the following sentence for similar task retrieval:";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Top-C by best cosine similarity to any shot.
    #[default]
    Cosine,
    /// Uniform among pool points inside the shots' convex hull.
    ConvexHull,
    /// Proportional to a Gaussian kernel density around the shots.
    Kde,
}

impl Sampler {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "cosine" => Some(Self::Cosine),
            "hull" | "convex_hull" | "convex-hull" => Some(Self::ConvexHull),
            "kde" => Some(Self::Kde),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Data budget `C`.
    pub budget: usize,
    /// Deduplication threshold `tau`.
    pub tau: f64,
    pub sampler: Sampler,
    /// KDE bandwidth.
    pub gamma: f64,
    /// Relative hull residual tolerance.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            budget: 1000,
            tau: 0.9,
            sampler: Sampler::Cosine,
            gamma: 1.0,
            epsilon: 1e-6,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Validation("data budget must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Validation(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Validation(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Validation(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Audit trail of one data selection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSelection {
    pub config: SelectionConfig,
    pub pool_size: usize,
    /// Sampler output before deduplication, in sampler order.
    pub candidates: Vec<String>,
    /// Final augmentation set with each item's best similarity to a shot.
    pub selected: Vec<ScoredId>,
    pub dedup_log: Vec<DedupEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Retrieval prefix the embeddings are expected to carry.
    pub embedding_prefix: String,
}

/// Sampler, then deduplication. `shots` and `pool` rows are used as given;
/// callers align them with their sample files beforehand.
pub fn select_data(
    shots: &EmbeddingMatrix,
    pool: &EmbeddingMatrix,
    config: &SelectionConfig,
) -> Result<DataSelection> {
    config.validate()?;
    if shots.is_empty() {
        return Err(Error::Validation("no shot embeddings".into()));
    }
    let cross = cross_similarity(shots, pool)?;
    let best = cross.column_max();
    let mut warnings = Vec::new();
    let candidates: Vec<String> = match config.sampler {
        Sampler::Cosine => select_top_c(&cross, pool.ids(), config.budget)?
            .into_iter()
            .map(|s| s.id)
            .collect(),
        Sampler::ConvexHull => {
            let s = convex_hull_sample(shots, pool, config.budget, config.epsilon, config.seed)?;
            warnings.extend(s.warnings);
            s.ids
        }
        Sampler::Kde => {
            let s = kde_sample(shots, pool, config.budget, config.gamma, config.seed)?;
            warnings.extend(s.warnings);
            s.ids
        }
    };
    let cand_emb = pool.select(&candidates)?;
    let scores: Vec<f64> = candidates
        .iter()
        .map(|id| best[pool.position(id).expect("candidate drawn from pool")])
        .collect();
    let outcome = semdedup(&cand_emb, &scores, config.tau)?;
    Ok(DataSelection {
        config: *config,
        pool_size: pool.len(),
        candidates,
        selected: outcome.kept,
        dedup_log: outcome.log,
        warnings,
        embedding_prefix: String::from(RETRIEVAL_PREFIX),
    })
}
