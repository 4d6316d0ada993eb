//! Group diversity over adapter parameters and the K-shot guided expert
//! selection procedure.
//!
//! Selection runs in three steps:
//!
//! 1. Keep the `M` models with the smallest `rank_p + rank_a`.
//! 2. Enumerate every `N`-tuple of those candidates and rank the tuples by
//!    mean pairwise parameter similarity, ascending (`rank_d = 1` is the
//!    most diverse tuple).
//! 3. Choose the tuple minimizing `sum(rank_p + rank_a) + rank_d`.
//!
//! Every tie is broken by lexicographic id (or lexicographic sorted id
//! list for tuples), so the result does not depend on bank order.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cmp_values, dot_f32};
use crate::report::extended_real;
use crate::scoring::{ModelScore, PerplexityMode};
use crate::types::ModelRecord;

/// Mean similarities at or below this are treated as zero when inverting.
pub const DIVERSITY_GUARD: f64 = 1e-9;

/// Default refusal threshold for `C(M, N)`.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Cosine similarity between two models, averaged over shared tensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub cosine: f64,
    /// Tensor names present in both models.
    pub common: usize,
    /// Tensor names present in only one of the two models.
    pub ignored: usize,
}

pub fn pairwise_model_similarity(a: &ModelRecord, b: &ModelRecord) -> Result<PairSimilarity> {
    let mut total = 0.0;
    let mut common = 0usize;
    for (name, ta) in &a.tensors {
        let Some(tb) = b.tensors.get(name) else {
            continue;
        };
        if ta.shape() != tb.shape() {
            return Err(Error::Incompatible(format!(
                "tensor {name:?}: {} has shape {:?}, {} has {:?}",
                a.model_id,
                ta.shape(),
                b.model_id,
                tb.shape()
            )));
        }
        let (na, nb) = (dot_f32(ta.data(), ta.data()), dot_f32(tb.data(), tb.data()));
        for (n, id) in [(na, &a.model_id), (nb, &b.model_id)] {
            if n == 0.0 {
                return Err(Error::DegenerateTensor(format!("{id}/{name} is all zeros")));
            }
        }
        // sqrt of the product (not the product of sqrts) keeps self-similarity at exactly 1.
        total += dot_f32(ta.data(), tb.data()) / libm::sqrt(na * nb);
        common += 1;
    }
    if common == 0 {
        return Err(Error::Incompatible(format!(
            "{} and {} share no tensor names",
            a.model_id, b.model_id
        )));
    }
    let ignored = a.tensors.len() + b.tensors.len() - 2 * common;
    Ok(PairSimilarity {
        cosine: (total / common as f64).clamp(-1.0, 1.0),
        common,
        ignored,
    })
}

/// `1 / mean`, with the `+inf` sentinel once the mean drops to the guard.
pub fn omega_from_mean(mean_similarity: f64) -> f64 {
    if mean_similarity <= DIVERSITY_GUARD {
        f64::INFINITY
    } else {
        1.0 / mean_similarity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupDiversity {
    pub mean_similarity: f64,
    #[serde(with = "extended_real")]
    pub omega: f64,
}

/// Inverse mean pairwise similarity over the unordered pairs of `models`.
pub fn group_diversity(models: &[&ModelRecord]) -> Result<GroupDiversity> {
    if models.len() < 2 {
        return Err(Error::Domain(format!(
            "group diversity needs at least 2 models, got {}",
            models.len()
        )));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            sum += pairwise_model_similarity(models[i], models[j])?.cosine;
            pairs += 1;
        }
    }
    let mean = sum / pairs as f64;
    Ok(GroupDiversity {
        mean_similarity: mean,
        omega: omega_from_mean(mean),
    })
}

/// Symmetric matrix of pairwise model similarities, diagonal 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityMatrix {
    pub model_ids: Vec<String>,
    /// Row-major `n x n`.
    pub sim: Vec<f64>,
    /// Row-major `n x n` count of tensors compared per pair.
    pub common: Vec<usize>,
}

impl DiversityMatrix {
    pub fn compute(models: &[&ModelRecord]) -> Result<Self> {
        let n = models.len();
        let mut sim = alloc::vec![1.0; n * n];
        let mut common = alloc::vec![0usize; n * n];
        for i in 0..n {
            common[i * n + i] = models[i].tensors.len();
            for j in i + 1..n {
                let p = pairwise_model_similarity(models[i], models[j])?;
                sim[i * n + j] = p.cosine;
                sim[j * n + i] = p.cosine;
                common[i * n + j] = p.common;
                common[j * n + i] = p.common;
            }
        }
        Ok(Self {
            model_ids: models.iter().map(|m| m.model_id.clone()).collect(),
            sim,
            common,
        })
    }

    pub fn len(&self) -> usize {
        self.model_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model_ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sim[i * self.len() + j]
    }

    /// Mean similarity over the unordered pairs of `members` (indices into
    /// this matrix), summed in index order.
    pub fn mean_over(&self, members: &[usize]) -> f64 {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                sum += self.get(i, j);
                pairs += 1;
            }
        }
        sum / pairs as f64
    }
}

/// How per-model and per-tuple ranks are combined in the tuple objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankCombination {
    /// Raw ranks summed as-is.
    #[default]
    Raw,
    /// Each rank divided by the size of its range before summing.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertSelectionConfig {
    /// Candidate pool size kept after rank-sum filtering.
    pub m: usize,
    /// Experts chosen from the candidates.
    pub n: usize,
    pub enumeration_cap: u128,
    pub rank_combination: RankCombination,
    /// Recorded for the audit trail; scoring happens upstream.
    pub perplexity_mode: PerplexityMode,
}

impl Default for ExpertSelectionConfig {
    fn default() -> Self {
        Self {
            m: 8,
            n: 4,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            rank_combination: RankCombination::Raw,
            perplexity_mode: PerplexityMode::Total,
        }
    }
}

impl ExpertSelectionConfig {
    /// Checks `2 <= n <= m` and, when given, `m <= bank_size`.
    pub fn validate(&self, bank_size: Option<usize>) -> Result<()> {
        if self.n < 2 || self.n > self.m {
            return Err(Error::Validation(format!(
                "need 2 <= N <= M, got M={} N={}",
                self.m, self.n
            )));
        }
        if let Some(b) = bank_size {
            if self.m > b {
                return Err(Error::Validation(format!(
                    "M={} exceeds bank size {b}",
                    self.m
                )));
            }
        }
        Ok(())
    }
}

/// Number of `k`-subsets of an `n`-set, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i + 1) as u128,
            None => return u128::MAX,
        };
    }
    acc
}

/// Calls `f` with every `k`-combination of `0..n` in lexicographic order.
pub fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let Some(pos) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return;
        };
        idx[pos] += 1;
        for i in pos + 1..k {
            idx[i] = idx[i - 1] + 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    #[serde(flatten)]
    pub score: ModelScore,
    pub rank_sum: usize,
    pub candidate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleRecord {
    /// Sorted member ids.
    pub ids: Vec<String>,
    pub mean_similarity: f64,
    #[serde(with = "extended_real")]
    pub omega: f64,
    pub rank_d: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub a: String,
    pub b: String,
    #[serde(flatten)]
    pub similarity: PairSimilarity,
}

/// Full audit trail of one expert selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSelection {
    pub config: ExpertSelectionConfig,
    /// Every bank model, id order.
    pub models: Vec<RankedModel>,
    /// `B_M`, in rank-sum order.
    pub candidates: Vec<String>,
    /// Pairwise similarities between candidates, id order.
    pub pairs: Vec<PairRecord>,
    /// All tuples, in lexicographic tuple order.
    pub tuples: Vec<TupleRecord>,
    /// `B_N`, sorted ids.
    pub chosen: Vec<String>,
}

pub fn select_experts(
    bank: &[ModelRecord],
    scores: &[ModelScore],
    config: &ExpertSelectionConfig,
) -> Result<ExpertSelection> {
    config.validate(Some(bank.len()))?;
    let count = binomial(config.m, config.n);
    if count > config.enumeration_cap {
        return Err(Error::EnumerationCap {
            count,
            cap: config.enumeration_cap,
        });
    }

    let mut by_id: BTreeMap<&str, &ModelRecord> = BTreeMap::new();
    for m in bank {
        if by_id.insert(m.model_id.as_str(), m).is_some() {
            return Err(Error::Validation(format!("duplicate bank id {}", m.model_id)));
        }
    }
    let mut score_by_id: BTreeMap<&str, &ModelScore> = BTreeMap::new();
    for s in scores {
        if !by_id.contains_key(s.model_id.as_str()) {
            return Err(Error::Validation(format!(
                "score for {} which is not in the bank",
                s.model_id
            )));
        }
        if score_by_id.insert(s.model_id.as_str(), s).is_some() {
            return Err(Error::Validation(format!("duplicate score for {}", s.model_id)));
        }
    }
    let missing: Vec<String> = by_id
        .keys()
        .filter(|id| !score_by_id.contains_key(*id))
        .map(|id| String::from(*id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Incomplete {
            what: "model scores".into(),
            missing,
        });
    }

    // Step 1: candidates by per-model rank sum, ties by id.
    let mut order: Vec<(&str, usize)> = score_by_id
        .iter()
        .map(|(id, s)| (*id, s.rank_sum()))
        .collect();
    order.sort_by_key(|&(_, sum)| sum);
    let candidates: Vec<String> = order[..config.m]
        .iter()
        .map(|(id, _)| String::from(*id))
        .collect();

    // Step 2: tuple diversity over candidates in id order, so combination
    // order equals lexicographic tuple order.
    let mut cand_sorted: Vec<&str> = candidates.iter().map(String::as_str).collect();
    cand_sorted.sort_unstable();
    let cand_models: Vec<&ModelRecord> = cand_sorted.iter().map(|id| by_id[id]).collect();
    let matrix = DiversityMatrix::compute(&cand_models)?;

    let mut pairs = Vec::new();
    for i in 0..cand_models.len() {
        for j in i + 1..cand_models.len() {
            let p = pairwise_model_similarity(cand_models[i], cand_models[j])?;
            pairs.push(PairRecord {
                a: cand_models[i].model_id.clone(),
                b: cand_models[j].model_id.clone(),
                similarity: p,
            });
        }
    }

    let mut tuples: Vec<(Vec<usize>, f64)> = Vec::with_capacity(count as usize);
    for_each_combination(cand_models.len(), config.n, |idx| {
        tuples.push((idx.to_vec(), matrix.mean_over(idx)));
    });
    // Stable sort on mean similarity keeps lexicographic order among ties.
    let mut by_diversity: Vec<usize> = (0..tuples.len()).collect();
    by_diversity.sort_by(|&a, &b| cmp_values(tuples[a].1, tuples[b].1));
    let mut rank_d = alloc::vec![0usize; tuples.len()];
    for (r, &t) in by_diversity.iter().enumerate() {
        rank_d[t] = r + 1;
    }

    // Step 3: tuple objective, first minimum in lexicographic order wins.
    let bank_size = bank.len() as f64;
    let tuple_count = tuples.len() as f64;
    let model_term = |id: &str| -> f64 {
        let s = score_by_id[id];
        match config.rank_combination {
            RankCombination::Raw => s.rank_sum() as f64,
            RankCombination::Normalized => {
                s.rank_p as f64 / bank_size + s.rank_a as f64 / bank_size
            }
        }
    };
    let mut records = Vec::with_capacity(tuples.len());
    let mut best: Option<(usize, f64)> = None;
    for (t, (idx, mean)) in tuples.iter().enumerate() {
        let ids: Vec<String> = idx.iter().map(|&i| String::from(cand_sorted[i])).collect();
        let d_term = match config.rank_combination {
            RankCombination::Raw => rank_d[t] as f64,
            RankCombination::Normalized => rank_d[t] as f64 / tuple_count,
        };
        let objective = ids.iter().map(|id| model_term(id)).sum::<f64>() + d_term;
        if best.is_none_or(|(_, b)| objective < b) {
            best = Some((t, objective));
        }
        records.push(TupleRecord {
            ids,
            mean_similarity: *mean,
            omega: omega_from_mean(*mean),
            rank_d: rank_d[t],
            objective,
        });
    }
    let chosen = records[best.expect("at least one tuple").0].ids.clone();

    let models = score_by_id
        .values()
        .map(|s| RankedModel {
            score: (*s).clone(),
            rank_sum: s.rank_sum(),
            candidate: candidates.contains(&s.model_id),
        })
        .collect();

    Ok(ExpertSelection {
        config: *config,
        models,
        candidates,
        pairs,
        tuples: records,
        chosen,
    })
}
