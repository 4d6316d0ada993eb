//! Domain records shared by every stage: instruction samples, adapter
//! tensors, per-token score records and embedding matrices.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest row norm an embedding may have.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// One instruction-tuning triple, optionally with a chain-of-thought
/// expansion of its answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub id: String,
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot_output: Option<String>,
}

impl InstructionSample {
    /// The target used for reasoning perplexity: the CoT rationale when
    /// present, the bare answer otherwise.
    pub fn reasoning_target(&self) -> &str {
        self.cot_output.as_deref().unwrap_or(&self.output)
    }

    fn validate(&self) -> Result<()> {
        if self.instruction.is_empty() {
            return Err(Error::Validation(format!(
                "sample {:?} has an empty instruction",
                self.id
            )));
        }
        if matches!(self.cot_output.as_deref(), Some("")) {
            return Err(Error::Validation(format!(
                "sample {:?} has an empty cot_output",
                self.id
            )));
        }
        Ok(())
    }
}

/// The K human-verified samples steering every selection step.
///
/// An empty set is representable (an empty file parses), but every
/// operation that needs shots calls [`ShotSet::require_nonempty`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShotSet {
    samples: Vec<InstructionSample>,
}

impl ShotSet {
    pub fn new(samples: Vec<InstructionSample>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &samples {
            s.validate()?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id {:?}", s.id)));
            }
        }
        Ok(Self { samples })
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self) -> &[InstructionSample] {
        &self.samples
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn require_nonempty(&self) -> Result<()> {
        if self.samples.is_empty() {
            Err(Error::Validation("shot set is empty (K must be at least 1)".into()))
        } else {
            Ok(())
        }
    }

    pub fn into_samples(self) -> Vec<InstructionSample> {
        self.samples
    }
}

/// A dense row-major matrix of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("empty tensor shape [{rows}, {cols}]")));
        }
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Shape(format!(
                "shape [{rows}, {cols}] does not match {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, alloc::vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// A bank member: adapter offsets keyed by tensor name plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRecord {
    pub model_id: String,
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

impl ModelRecord {
    pub fn new(model_id: impl Into<String>, tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            model_id: model_id.into(),
            tensors,
            meta: BTreeMap::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }
}

/// Teacher-forced log-probabilities and exact-match outcome for one
/// (model, sample) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub model_id: String,
    pub sample_id: String,
    #[serde(default)]
    pub token_logprobs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

impl ScoreRecord {
    fn validate(&self) -> Result<()> {
        for (i, &lp) in self.token_logprobs.iter().enumerate() {
            if lp.is_nan() || lp > 0.0 {
                return Err(Error::Domain(format!(
                    "record ({}, {}) token {i} has log-probability {lp}",
                    self.model_id, self.sample_id
                )));
            }
        }
        Ok(())
    }
}

/// All score records, keyed by (model_id, sample_id).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    records: BTreeMap<(String, String), ScoreRecord>,
}

impl ScoreTable {
    pub fn from_records(records: impl IntoIterator<Item = ScoreRecord>) -> Result<Self> {
        let mut table = BTreeMap::new();
        for rec in records {
            rec.validate()?;
            let key = (rec.model_id.clone(), rec.sample_id.clone());
            if table.contains_key(&key) {
                return Err(Error::Validation(format!(
                    "duplicate score record for ({}, {})",
                    key.0, key.1
                )));
            }
            table.insert(key, rec);
        }
        Ok(Self { records: table })
    }

    pub fn get(&self, model_id: &str, sample_id: &str) -> Option<&ScoreRecord> {
        // BTreeMap<(String, String), _> cannot be queried by borrowed tuples.
        self.records
            .get(&(String::from(model_id), String::from(sample_id)))
    }

    /// Distinct model ids in lexicographic order.
    pub fn model_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.keys().map(|(m, _)| m.clone()).collect();
        ids.dedup();
        ids
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &ScoreRecord> {
        self.records.values()
    }
}

/// Id-indexed rows of embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    rows: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, rows: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("embedding dim must be positive".into()));
        }
        if ids.len().checked_mul(dim) != Some(rows.len()) {
            return Err(Error::Shape(format!(
                "{} ids x dim {dim} does not match {} values",
                ids.len(),
                rows.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for (i, id) in ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!("duplicate embedding id {id:?}")));
            }
            let row = &rows[i * dim..(i + 1) * dim];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding row {i} ({id:?})")));
            }
            if crate::linalg::norm_f32(row) <= MIN_ROW_NORM {
                return Err(Error::Validation(format!(
                    "embedding row {i} ({id:?}) has zero norm"
                )));
            }
        }
        Ok(Self { ids, dim, rows })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.rows
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// A new matrix holding the rows for `ids`, in that order.
    pub fn select<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self> {
        let index: BTreeMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut missing = Vec::new();
        let mut rows = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            match index.get(id.as_ref()) {
                Some(&i) => rows.extend_from_slice(self.row(i)),
                None => missing.push(String::from(id.as_ref())),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Incomplete {
                what: "embeddings".into(),
                missing,
            });
        }
        Self::new(
            ids.iter().map(|s| String::from(s.as_ref())).collect(),
            self.dim,
            rows,
        )
    }
}
