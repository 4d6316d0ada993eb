use alloc::vec::Vec;

use super::params::Mat;
use crate::linalg::cmp_values;

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    /// `x * W_g`.
    pub logits: Vec<f64>,
    /// Kept experts, best logit first.
    pub selected: Vec<usize>,
    /// Dense gate vector; exactly `k` entries are nonzero.
    pub weights: Vec<f64>,
}

/// Indices of the `k` largest entries, best first; ties go to the lower index.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| cmp_values(logits[b], logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Top-k softmax gate: keep the `k` largest logits, send the rest to
/// `-inf`, softmax over all experts.
pub fn gate(x: &[f64], w_g: &Mat, k: usize) -> GateOutput {
    let logits = w_g.vec_mul(x);
    let selected = top_k_indices(&logits, k);
    let max = logits[selected[0]];
    let mut weights = alloc::vec![0.0; logits.len()];
    let mut total = 0.0;
    for &i in &selected {
        let e = libm::exp(logits[i] - max);
        weights[i] = e;
        total += e;
    }
    for &i in &selected {
        weights[i] /= total;
    }
    GateOutput {
        logits,
        selected,
        weights,
    }
}
