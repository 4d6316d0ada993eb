use alloc::format;

use crate::error::{Error, Result};
use crate::types::ModelRecord;

/// `W + sum_i w_i * dW_i` per tensor of `base`.
///
/// A delta without a given tensor contributes zero to it; delta tensors
/// unknown to `base` are ignored. Weights must sum to one within 1e-9.
pub fn linear_merge(base: &ModelRecord, deltas: &[ModelRecord], weights: &[f64]) -> Result<ModelRecord> {
    if deltas.len() != weights.len() {
        return Err(Error::Validation(format!(
            "{} deltas but {} weights",
            deltas.len(),
            weights.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("merge weights sum to {sum}, not 1")));
    }
    let mut merged = base.clone();
    for (name, tensor) in merged.tensors.iter_mut() {
        let mut acc: alloc::vec::Vec<f64> = tensor.data().iter().map(|&x| x as f64).collect();
        for (delta, &w) in deltas.iter().zip(weights) {
            let Some(d) = delta.tensors.get(name) else {
                continue;
            };
            if d.shape() != tensor.shape() {
                return Err(Error::Incompatible(format!(
                    "{}/{name} has shape {:?}, base has {:?}",
                    delta.model_id,
                    d.shape(),
                    tensor.shape()
                )));
            }
            for (a, &x) in acc.iter_mut().zip(d.data()) {
                *a += w * x as f64;
            }
        }
        for (out, a) in tensor.data_mut().iter_mut().zip(acc) {
            *out = a as f32;
        }
    }
    merged.model_id = format!("{}+merge", base.model_id);
    Ok(merged)
}
