use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ModelRecord;

/// Replaced by the layer index in per-layer expert tensor names.
pub const LAYER_PLACEHOLDER: &str = "{layer}";

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: alloc::vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!("{rows}x{cols} from {} values", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * v` for a column vector `v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `v^T * self` for a row vector `v`.
    pub fn vec_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += vr * m;
            }
        }
        out
    }

    fn random(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Self {
        // Rounded through f32 so the value survives an f32 archive round-trip.
        let data = (0..rows * cols)
            .map(|_| (rng.gen_range(-scale..scale) as f32) as f64)
            .collect();
        Self { rows, cols, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub experts: usize,
    pub top_k: usize,
    pub layers: usize,
    pub dim: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            experts: 4,
            top_k: 2,
            layers: 2,
            dim: 8,
            vocab: 64,
            seed: 0,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 || self.top_k > self.experts {
            return Err(Error::Validation(format!(
                "need 1 <= k <= N, got k={} N={}",
                self.top_k, self.experts
            )));
        }
        if self.layers < 1 || self.dim < 1 {
            return Err(Error::Validation("layers and dim must be at least 1".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Validation(format!("vocab must be at least 2, got {}", self.vocab)));
        }
        Ok(())
    }
}

/// Every trainable tensor. Gradients share this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// Per layer, `d x N`.
    pub gates: Vec<Mat>,
    /// Per layer, per expert, `d x d`.
    pub experts: Vec<Vec<Mat>>,
    /// `V x d`.
    pub embedding: Mat,
    /// `d x V`.
    pub output: Mat,
}

impl Parameters {
    pub fn zeros(cfg: &MoeConfig) -> Self {
        Self {
            gates: (0..cfg.layers).map(|_| Mat::zeros(cfg.dim, cfg.experts)).collect(),
            experts: (0..cfg.layers)
                .map(|_| (0..cfg.experts).map(|_| Mat::zeros(cfg.dim, cfg.dim)).collect())
                .collect(),
            embedding: Mat::zeros(cfg.vocab, cfg.dim),
            output: Mat::zeros(cfg.dim, cfg.vocab),
        }
    }

    /// Tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (l, g) in self.gates.iter().enumerate() {
            out.push((format!("gate.{l}"), g));
        }
        for (l, layer) in self.experts.iter().enumerate() {
            for (i, e) in layer.iter().enumerate() {
                out.push((format!("expert.{l}.{i}"), e));
            }
        }
        out.push((String::from("embedding"), &self.embedding));
        out.push((String::from("output"), &self.output));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        for (l, g) in self.gates.iter_mut().enumerate() {
            out.push((format!("gate.{l}"), g));
        }
        for (l, layer) in self.experts.iter_mut().enumerate() {
            for (i, e) in layer.iter_mut().enumerate() {
                out.push((format!("expert.{l}.{i}"), e));
            }
        }
        out.push((String::from("embedding"), &mut self.embedding));
        out.push((String::from("output"), &mut self.output));
        out
    }

    /// First non-finite entry, as `name[row, col]`.
    pub fn first_non_finite(&self) -> Option<String> {
        for (name, m) in self.named() {
            if let Some(i) = m.data.iter().position(|v| !v.is_finite()) {
                return Some(format!("{name}[{}, {}]", i / m.cols, i % m.cols));
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeState {
    pub config: MoeConfig,
    pub params: Parameters,
}

impl MoeState {
    /// Every parameter drawn uniformly from `(-scale, scale)`.
    pub fn random(config: MoeConfig, scale: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, n, v) = (config.dim, config.experts, config.vocab);
        let gates = (0..config.layers).map(|_| Mat::random(d, n, scale, &mut rng)).collect();
        let experts = (0..config.layers)
            .map(|_| (0..n).map(|_| Mat::random(d, d, scale, &mut rng)).collect())
            .collect();
        let embedding = Mat::random(v, d, scale, &mut rng);
        let output = Mat::random(d, v, scale, &mut rng);
        Ok(Self {
            config,
            params: Parameters {
                gates,
                experts,
                embedding,
                output,
            },
        })
    }

    /// Checks every tensor's shape against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let p = &self.params;
        let bad = |what: &str| Err(Error::Shape(format!("{what} does not match the config")));
        if p.gates.len() != c.layers || p.experts.len() != c.layers {
            return bad("layer count");
        }
        if p.gates.iter().any(|g| (g.rows, g.cols) != (c.dim, c.experts)) {
            return bad("gate shape");
        }
        if p.experts.iter().any(|l| {
            l.len() != c.experts || l.iter().any(|e| (e.rows, e.cols) != (c.dim, c.dim))
        }) {
            return bad("expert shape");
        }
        if (p.embedding.rows, p.embedding.cols) != (c.vocab, c.dim) {
            return bad("embedding shape");
        }
        if (p.output.rows, p.output.cols) != (c.dim, c.vocab) {
            return bad("output shape");
        }
        Ok(())
    }

    /// Round every parameter through f32, matching archive storage.
    pub fn round_to_f32(&mut self) {
        for (_, m) in self.params.named_mut() {
            for v in &mut m.data {
                *v = (*v as f32) as f64;
            }
        }
    }
}

/// Build a MoE whose expert `i` is seeded from `selected[i]`.
///
/// `tensor_name` names a `d x d` tensor in every record; if it contains
/// [`LAYER_PLACEHOLDER`] the layer index is substituted, otherwise the same
/// tensor seeds every layer. Gates start at zero (uniform routing);
/// embedding and output projection are drawn from `config.seed`.
pub fn init_from_bank(selected: &[ModelRecord], config: MoeConfig, tensor_name: &str) -> Result<MoeState> {
    config.validate()?;
    if selected.len() != config.experts {
        return Err(Error::Validation(format!(
            "{} records for {} experts",
            selected.len(),
            config.experts
        )));
    }
    let d = config.dim;
    let mut params = Parameters::zeros(&config);
    for (l, layer) in params.experts.iter_mut().enumerate() {
        let name = tensor_name.replace(LAYER_PLACEHOLDER, &format!("{l}"));
        for (expert, record) in layer.iter_mut().zip(selected) {
            let t = record.tensor(&name).ok_or_else(|| {
                Error::Incompatible(format!("{} has no tensor {name:?}", record.model_id))
            })?;
            if t.shape() != [d, d] {
                return Err(Error::Incompatible(format!(
                    "{}/{name} has shape {:?}, expected [{d}, {d}]",
                    record.model_id,
                    t.shape()
                )));
            }
            expert.data = t.data().iter().map(|&x| x as f64).collect();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = 1.0 / libm::sqrt(d as f64);
    params.embedding = Mat::random(config.vocab, d, scale, &mut rng);
    params.output = Mat::random(d, config.vocab, scale, &mut rng);
    Ok(MoeState { config, params })
}
