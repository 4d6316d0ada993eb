use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Experts chosen for one token at one layer, with their gate weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Routing {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub experts: usize,
    pub top_k: usize,
    /// `layers[l][token]`.
    pub layers: Vec<Vec<Routing>>,
}

impl RoutingTrace {
    pub fn tokens(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    /// Concatenate traces from several forward passes.
    pub fn extend(&mut self, other: RoutingTrace) -> Result<()> {
        if (self.experts, self.top_k, self.layers.len())
            != (other.experts, other.top_k, other.layers.len())
        {
            return Err(Error::Shape("routing traces have different layouts".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(other.layers) {
            a.extend(b);
        }
        Ok(())
    }
}

/// Per layer, the share of top-k slots each expert received. Rows sum to 1.
pub fn activation_stats(trace: &RoutingTrace) -> Result<Vec<Vec<f64>>> {
    let tokens = trace.tokens();
    if tokens == 0 || trace.top_k == 0 {
        return Err(Error::Validation("empty routing trace".into()));
    }
    let denom = (trace.top_k * tokens) as f64;
    trace
        .layers
        .iter()
        .map(|layer| {
            if layer.len() != tokens {
                return Err(Error::Shape("layers disagree on token count".into()));
            }
            let mut counts = alloc::vec![0usize; trace.experts];
            for r in layer {
                if r.experts.len() != trace.top_k {
                    return Err(Error::Shape("routing entry with wrong expert count".into()));
                }
                for &e in &r.experts {
                    *counts
                        .get_mut(e)
                        .ok_or_else(|| Error::Shape("expert index out of range".into()))? += 1;
                }
            }
            Ok(counts.into_iter().map(|c| c as f64 / denom).collect())
        })
        .collect()
}
