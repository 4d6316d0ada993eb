//! Mixture-of-experts state on disk, the byte-level toy tokenizer, the
//! training loop and activation statistics.
//!
//! A state directory holds `moe.json` (config, expert ids) and
//! `state.safetensors` (every parameter as an f32 tensor).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use expertforge_core::moe::{
    activation_stats, cosine_with_warmup, forward, loss_and_grads, sgd_step, AdamW, AdamWConfig, Example,
    MoeConfig, MoeState, Parameters, RoutingTrace,
};
use expertforge_core::{InstructionSample, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};
use crate::io::tensors::{decode_tensor_archive, encode_tensor_archive};

pub const STATE_CONFIG_FILE: &str = "moe.json";
pub const STATE_TENSOR_FILE: &str = "state.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeManifest {
    pub config: MoeConfig,
    /// Bank model seeding each expert, in expert order.
    pub expert_ids: Vec<String>,
    pub expert_tensor: String,
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    b
}

/// Tensor archive bytes for `state`. Values are narrowed to f32.
pub fn encode_state(state: &MoeState) -> Vec<u8> {
    let tensors: BTreeMap<String, Tensor> = state
        .params
        .named()
        .into_iter()
        .map(|(name, m)| {
            let data = m.data.iter().map(|&v| v as f32).collect();
            (name, Tensor::new(m.rows, m.cols, data).expect("parameter shapes are non-empty"))
        })
        .collect();
    encode_tensor_archive(&tensors, &BTreeMap::new())
}

pub fn decode_state(path: &Path, bytes: &[u8], config: MoeConfig) -> Result<MoeState> {
    let (mut tensors, _) = decode_tensor_archive(path, bytes)?;
    let mut params = Parameters::zeros(&config);
    for (name, m) in params.named_mut() {
        let t = tensors.remove(&name).ok_or_else(|| ForgeError::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("missing tensor {name:?}"),
        })?;
        if t.shape() != [m.rows, m.cols] {
            return Err(ForgeError::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("tensor {name:?} has shape {:?}, expected [{}, {}]", t.shape(), m.rows, m.cols),
            });
        }
        m.data = t.data().iter().map(|&v| v as f64).collect();
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(ForgeError::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("unexpected tensor {extra:?}"),
        });
    }
    let state = MoeState { config, params };
    state.validate().map_err(|source| ForgeError::Invalid {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(state)
}

pub fn save_state(dir: &Path, manifest: &MoeManifest, state: &MoeState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ForgeError::io(dir, e))?;
    let cfg = dir.join(STATE_CONFIG_FILE);
    fs::write(&cfg, json_bytes(manifest)).map_err(|e| ForgeError::io(&cfg, e))?;
    let t = dir.join(STATE_TENSOR_FILE);
    fs::write(&t, encode_state(state)).map_err(|e| ForgeError::io(&t, e))
}

pub fn load_state(dir: &Path) -> Result<(MoeManifest, MoeState)> {
    let cfg = dir.join(STATE_CONFIG_FILE);
    let text = fs::read_to_string(&cfg).map_err(|e| ForgeError::io(&cfg, e))?;
    let manifest: MoeManifest = serde_json::from_str(&text).map_err(|e| ForgeError::Parse {
        path: cfg.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let t = dir.join(STATE_TENSOR_FILE);
    let bytes = fs::read(&t).map_err(|e| ForgeError::io(&t, e))?;
    let state = decode_state(&t, &bytes, manifest.config)?;
    Ok((manifest, state))
}

/// Byte-level tokens folded into the vocabulary.
pub fn tokenize(text: &str, vocab: usize) -> Vec<usize> {
    text.bytes().map(|b| b as usize % vocab).collect()
}

/// Context is the instruction, plus a newline and the input when the input
/// is non-empty; the target is the output. Context and target together are
/// cut to `max_len` tokens, context first. Samples left without a target
/// token yield `None`.
pub fn sample_to_example(sample: &InstructionSample, vocab: usize, max_len: usize) -> Option<Example> {
    let mut prompt = sample.instruction.clone();
    if !sample.input.is_empty() {
        prompt.push('\n');
        prompt.push_str(&sample.input);
    }
    let mut context = tokenize(&prompt, vocab);
    let mut target = tokenize(&sample.output, vocab);
    context.truncate(max_len.saturating_sub(1));
    target.truncate(max_len.saturating_sub(context.len()));
    (!context.is_empty() && !target.is_empty()).then_some(Example { context, target })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adamw,
    Sgd,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warm-up, then cosine decay to zero at the last update.
    #[default]
    CosineWarmup,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub optimizer: Optimizer,
    pub adamw: AdamWConfig,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    /// Examples per gradient evaluation.
    pub batch_size: usize,
    /// Gradient evaluations averaged into one update.
    pub grad_accumulation: usize,
    /// Token budget per example.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 5e-5,
            optimizer: Optimizer::Adamw,
            adamw: AdamWConfig::default(),
            schedule: Schedule::CosineWarmup,
            warmup_steps: 100,
            batch_size: 2,
            grad_accumulation: 16,
            max_len: 1024,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ForgeError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.grad_accumulation == 0 || self.max_len < 2 {
            return Err(ForgeError::Config(
                "batch_size and grad_accumulation must be positive, max_len at least 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub config: TrainingConfig,
    pub examples: usize,
    pub skipped: usize,
    /// Mean loss of every update, in order.
    pub step_losses: Vec<f64>,
    /// Mean loss over each epoch's updates.
    pub epoch_losses: Vec<f64>,
}

fn add_scaled(acc: &mut Parameters, g: &Parameters, scale: f64) {
    for ((_, a), (_, b)) in acc.named_mut().into_iter().zip(g.named()) {
        for (x, y) in a.data.iter_mut().zip(&b.data) {
            *x += scale * y;
        }
    }
}

/// Minibatch training over `samples`, shuffled per epoch from `cfg.seed`. The
/// trained state is rounded to f32 so it equals what [`save_state`] stores.
pub fn train(state: &mut MoeState, samples: &[InstructionSample], cfg: &TrainingConfig) -> Result<TrainingLog> {
    cfg.validate()?;
    let examples: Vec<Example> = samples
        .iter()
        .filter_map(|s| sample_to_example(s, state.config.vocab, cfg.max_len))
        .collect();
    let skipped = samples.len() - examples.len();
    if examples.is_empty() {
        return Err(expertforge_core::Error::Validation("no training example has a target token".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();
    let per_update = cfg.batch_size * cfg.grad_accumulation;
    let total_updates = cfg.epochs * examples.len().div_ceil(per_update);
    let mut adamw = AdamW::new(&state.config, cfg.adamw);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let first = step_losses.len();
        for update in order.chunks(per_update) {
            let micro: Vec<&[usize]> = update.chunks(cfg.batch_size).collect();
            let scale = 1.0 / micro.len() as f64;
            let mut grads = Parameters::zeros(&state.config);
            let mut loss = 0.0;
            for idx in micro {
                let batch: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
                let r = loss_and_grads(&batch, state)?;
                add_scaled(&mut grads, &r.grads, scale);
                loss += scale * r.loss;
            }
            let lr = cfg.lr
                * match cfg.schedule {
                    Schedule::CosineWarmup => cosine_with_warmup(step_losses.len(), total_updates, cfg.warmup_steps),
                    Schedule::Constant => 1.0,
                };
            match cfg.optimizer {
                Optimizer::Adamw => adamw.step(state, &grads, lr),
                Optimizer::Sgd => sgd_step(state, &grads, lr),
            }
            step_losses.push(loss);
        }
        let n = (step_losses.len() - first) as f64;
        epoch_losses.push(step_losses[first..].iter().sum::<f64>() / n);
    }
    if let Some(loc) = state.params.first_non_finite() {
        return Err(expertforge_core::Error::NonFinite(format!("parameter {loc} after training")).into());
    }
    state.round_to_f32();
    Ok(TrainingLog {
        config: *cfg,
        examples: examples.len(),
        skipped,
        step_losses,
        epoch_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub expert_ids: Vec<String>,
    pub top_k: usize,
    pub tokens: usize,
    /// `rates[layer][expert]`: share of top-k slots; each row sums to 1.
    pub rates: Vec<Vec<f64>>,
}

/// Routes every token of every sample (context then target) and reports
/// per-layer activation rates.
pub fn activation_report(
    state: &MoeState,
    expert_ids: &[String],
    samples: &[InstructionSample],
    max_len: usize,
) -> Result<ActivationReport> {
    let mut trace: Option<RoutingTrace> = None;
    for s in samples {
        let Some(ex) = sample_to_example(s, state.config.vocab, max_len) else {
            continue;
        };
        let tokens: Vec<usize> = ex.context.iter().chain(&ex.target).copied().collect();
        let t = forward(&tokens, state)?.trace;
        match trace.as_mut() {
            None => trace = Some(t),
            Some(acc) => acc.extend(t)?,
        }
    }
    let trace = trace.ok_or_else(|| expertforge_core::Error::Validation("no tokens to route".into()))?;
    Ok(ActivationReport {
        expert_ids: expert_ids.to_vec(),
        top_k: state.config.top_k,
        tokens: trace.tokens(),
        rates: activation_stats(&trace)?,
    })
}
