use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::squared_distance;
use crate::types::EmbeddingMatrix;

/// Gaussian kernel density of every pool row under the shot rows:
/// `p(u) = 1/(K*gamma) * sum_i exp(-||u - u_i||^2 / (2 gamma^2))`.
pub fn kde_density(shots: &EmbeddingMatrix, pool: &EmbeddingMatrix, gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Validation(format!("bandwidth must be positive, got {gamma}")));
    }
    if shots.dim() != pool.dim() {
        return Err(Error::Shape(format!(
            "shot dim {} vs pool dim {}",
            shots.dim(),
            pool.dim()
        )));
    }
    if shots.is_empty() {
        return Err(Error::Validation("density needs at least one shot".into()));
    }
    let widen = |m: &EmbeddingMatrix, i: usize| -> Vec<f64> { m.row(i).iter().map(|&x| x as f64).collect() };
    let anchors: Vec<Vec<f64>> = (0..shots.len()).map(|i| widen(shots, i)).collect();
    let norm = 1.0 / (shots.len() as f64 * gamma);
    let two_g2 = 2.0 * gamma * gamma;
    Ok((0..pool.len())
        .map(|j| {
            let u = widen(pool, j);
            norm * anchors
                .iter()
                .map(|a| libm::exp(-squared_distance(&u, a) / two_g2))
                .sum::<f64>()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdeSample {
    /// Sampled ids, in draw order.
    pub ids: Vec<String>,
    /// Density of every pool row, in pool order. Independent of the seed.
    pub density: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Draw `c` distinct indices with probability proportional to `weights`,
/// renormalizing after each draw. Once the remaining weight is zero the
/// rest are drawn uniformly.
pub fn weighted_sample_without_replacement(
    weights: &[f64],
    c: usize,
    rng: &mut impl Rng,
) -> (Vec<usize>, bool) {
    let mut w = weights.to_vec();
    let mut alive: Vec<bool> = alloc::vec![true; w.len()];
    let mut out = Vec::with_capacity(c);
    let mut fell_back = false;
    while out.len() < c.min(w.len()) {
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &wi) in w.iter().enumerate() {
                if wi > 0.0 {
                    acc += wi;
                    chosen = Some(i);
                    if target < acc {
                        break;
                    }
                }
            }
            chosen.expect("positive total implies a positive weight")
        } else {
            fell_back = true;
            let remaining: Vec<usize> = (0..w.len()).filter(|&i| alive[i]).collect();
            remaining[rng.gen_range(0..remaining.len())]
        };
        out.push(pick);
        alive[pick] = false;
        w[pick] = 0.0;
    }
    (out, fell_back)
}

/// Sample `c` pool ids without replacement, proportionally to their
/// kernel density under the shots.
pub fn kde_sample(
    shots: &EmbeddingMatrix,
    pool: &EmbeddingMatrix,
    c: usize,
    gamma: f64,
    seed: u64,
) -> Result<KdeSample> {
    if c > pool.len() {
        return Err(Error::Budget {
            requested: c,
            available: pool.len(),
        });
    }
    let density = kde_density(shots, pool, gamma)?;
    let mut warnings = Vec::new();
    if density.iter().all(|&p| p == 0.0) {
        warnings.push(String::from(
            "all kernel densities underflowed to zero; sampling uniformly",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (picked, fell_back) = weighted_sample_without_replacement(&density, c, &mut rng);
    if fell_back && warnings.is_empty() {
        warnings.push(String::from(
            "remaining kernel densities are zero; finished the draw uniformly",
        ));
    }
    Ok(KdeSample {
        ids: picked.iter().map(|&j| pool.ids()[j].clone()).collect(),
        density,
        warnings,
    })
}
