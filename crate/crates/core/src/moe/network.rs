use alloc::format;
use alloc::vec::Vec;

use super::gate::gate;
use super::params::{MoeState, Parameters};
use super::stats::{Routing, RoutingTrace};
use crate::error::{Error, Result};

/// One teacher-forced training pair. Every target token is predicted from
/// the token right before it, so `context` must be non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub context: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    /// `(input token, label)` for every target position.
    fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let last_context = self.context.last().copied();
        self.target.iter().enumerate().map(move |(t, &y)| {
            let input = if t == 0 {
                last_context.expect("validated non-empty context")
            } else {
                self.target[t - 1]
            };
            (input, y)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Vocabulary logits per position.
    pub logits: Vec<Vec<f64>>,
    pub trace: RoutingTrace,
}

struct LayerCache {
    input: Vec<f64>,
    selected: Vec<usize>,
    weights: Vec<f64>,
    expert_out: Vec<Vec<f64>>,
}

fn check_token(state: &MoeState, tok: usize) -> Result<()> {
    if tok >= state.config.vocab {
        Err(Error::Shape(format!(
            "token id {tok} outside vocabulary of {}",
            state.config.vocab
        )))
    } else {
        Ok(())
    }
}

/// Runs one token through every layer, returning the final hidden state and
/// per-layer caches.
fn run_token(state: &MoeState, tok: usize) -> (Vec<f64>, Vec<LayerCache>) {
    let p = &state.params;
    let k = state.config.top_k;
    let mut h = p.embedding.row(tok).to_vec();
    let mut caches = Vec::with_capacity(state.config.layers);
    for (gate_w, experts) in p.gates.iter().zip(&p.experts) {
        let g = gate(&h, gate_w, k);
        let expert_out: Vec<Vec<f64>> = g.selected.iter().map(|&i| experts[i].mul_vec(&h)).collect();
        // Accumulate from the first term so a single expert passes through
        // bit-for-bit.
        let mut next: Vec<f64> = expert_out[0].iter().map(|v| g.weights[g.selected[0]] * v).collect();
        for (j, out) in expert_out.iter().enumerate().skip(1) {
            let w = g.weights[g.selected[j]];
            for (n, v) in next.iter_mut().zip(out) {
                *n += w * v;
            }
        }
        caches.push(LayerCache {
            input: core::mem::replace(&mut h, next),
            selected: g.selected,
            weights: g.weights,
            expert_out,
        });
    }
    (h, caches)
}

fn trace_from(caches: &[Vec<LayerCache>], state: &MoeState) -> RoutingTrace {
    let layers = (0..state.config.layers)
        .map(|l| {
            caches
                .iter()
                .map(|c| Routing {
                    experts: c[l].selected.clone(),
                    weights: c[l].selected.iter().map(|&i| c[l].weights[i]).collect(),
                })
                .collect()
        })
        .collect();
    RoutingTrace {
        experts: state.config.experts,
        top_k: state.config.top_k,
        layers,
    }
}

/// Vocabulary logits for every position of `tokens`, plus the routing trace.
pub fn forward(tokens: &[usize], state: &MoeState) -> Result<ForwardOutput> {
    for &t in tokens {
        check_token(state, t)?;
    }
    let mut logits = Vec::with_capacity(tokens.len());
    let mut caches = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let (h, c) = run_token(state, t);
        logits.push(state.params.output.vec_mul(&h));
        caches.push(c);
    }
    let trace = trace_from(&caches, state);
    Ok(ForwardOutput { logits, trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrads {
    /// Mean negative log-likelihood per target token.
    pub loss: f64,
    pub grads: Parameters,
    pub tokens: usize,
}

/// Mean token cross-entropy over `batch` and its gradient for every
/// parameter. The top-k selection is held fixed during the backward pass.
pub fn loss_and_grads(batch: &[Example], state: &MoeState) -> Result<LossAndGrads> {
    if let Some(loc) = state.params.first_non_finite() {
        return Err(Error::NonFinite(format!("parameter {loc}")));
    }
    let mut count = 0usize;
    for (b, ex) in batch.iter().enumerate() {
        if ex.context.is_empty() {
            return Err(Error::Validation(format!("example {b} has an empty context")));
        }
        for &t in ex.context.iter().chain(&ex.target) {
            check_token(state, t)?;
        }
        count += ex.target.len();
    }
    if count == 0 {
        return Err(Error::Validation("batch has no target tokens".into()));
    }
    let scale = 1.0 / count as f64;
    let p = &state.params;
    let cfg = &state.config;
    let mut grads = Parameters::zeros(cfg);
    let mut total = 0.0;

    for (b, ex) in batch.iter().enumerate() {
        for (pos, (input, label)) in ex.positions().enumerate() {
            let (h, caches) = run_token(state, input);
            let logits = p.output.vec_mul(&h);
            let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let exps: Vec<f64> = logits.iter().map(|&v| libm::exp(v - max)).collect();
            let z: f64 = exps.iter().sum();
            let nll = libm::log(z) + max - logits[label];
            if !nll.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at example {b} position {pos} (output logits)"
                )));
            }
            total += nll;

            // d loss / d logits = softmax - onehot, scaled by 1/count.
            let dlogits: Vec<f64> = exps
                .iter()
                .enumerate()
                .map(|(v, &e)| scale * (e / z - if v == label { 1.0 } else { 0.0 }))
                .collect();
            for (a, &ha) in h.iter().enumerate() {
                for (v, &dv) in dlogits.iter().enumerate() {
                    grads.output.data[a * cfg.vocab + v] += ha * dv;
                }
            }
            let mut dh = p.output.mul_vec(&dlogits);

            for (l, cache) in caches.iter().enumerate().rev() {
                let x = &cache.input;
                let mut dx = alloc::vec![0.0; cfg.dim];
                // Gradient w.r.t. each kept weight, then through the softmax.
                let dweights: Vec<f64> = cache
                    .expert_out
                    .iter()
                    .map(|out| out.iter().zip(&dh).map(|(o, g)| o * g).sum())
                    .collect();
                let mean: f64 = cache
                    .selected
                    .iter()
                    .zip(&dweights)
                    .map(|(&i, dw)| cache.weights[i] * dw)
                    .sum();
                for (j, &i) in cache.selected.iter().enumerate() {
                    let w = cache.weights[i];
                    let expert = &p.experts[l][i];
                    let gexp = &mut grads.experts[l][i];
                    // out = W x, d out = w * dh
                    for r in 0..cfg.dim {
                        let dout = w * dh[r];
                        if dout == 0.0 {
                            continue;
                        }
                        for c in 0..cfg.dim {
                            gexp.data[r * cfg.dim + c] += dout * x[c];
                            dx[c] += dout * expert.data[r * cfg.dim + c];
                        }
                    }
                    let dlogit = w * (dweights[j] - mean);
                    let gw = &p.gates[l];
                    for a in 0..cfg.dim {
                        grads.gates[l].data[a * cfg.experts + i] += x[a] * dlogit;
                        dx[a] += gw.data[a * cfg.experts + i] * dlogit;
                    }
                }
                dh = dx;
            }
            for (g, d) in grads.embedding.data[input * cfg.dim..(input + 1) * cfg.dim]
                .iter_mut()
                .zip(&dh)
            {
                *g += d;
            }
        }
    }
    Ok(LossAndGrads {
        loss: total * scale,
        grads,
        tokens: count,
    })
}

/// `params -= lr * grads`.
pub fn sgd_step(state: &mut MoeState, grads: &Parameters, lr: f64) {
    for ((_, p), (_, g)) in state.params.named_mut().into_iter().zip(grads.named()) {
        for (pv, gv) in p.data.iter_mut().zip(&g.data) {
            *pv -= lr * gv;
        }
    }
}
