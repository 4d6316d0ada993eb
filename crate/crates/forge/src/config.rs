//! Pipeline configuration: one JSON document, overridable through
//! `EXPERTFORGE_*` environment variables.
//!
//! An override name is the JSON path in upper case with `__` between
//! levels, so `EXPERTFORGE_MODEL_SELECTION__M=5` sets `model_selection.m`.
//! Values that parse as JSON are used as such, anything else as a string.

use std::fs;
use std::path::{Path, PathBuf};

use expertforge_core::data_select::SelectionConfig;
use expertforge_core::model_select::{ExpertSelectionConfig, RankCombination, DEFAULT_ENUMERATION_CAP};
use expertforge_core::moe::MoeConfig;
use expertforge_core::scoring::{PerplexityMode, PostProcessorRegistry};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{ForgeError, Result};
use crate::moe_io::TrainingConfig;

pub const ENV_PREFIX: &str = "EXPERTFORGE_";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub bank_dir: PathBuf,
    pub shots: PathBuf,
    pub pool: PathBuf,
    pub shots_emb: PathBuf,
    pub pool_emb: PathBuf,
    /// Score table JSON-Lines.
    pub scores: PathBuf,
    pub workdir: PathBuf,
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.bank_dir,
            &mut self.shots,
            &mut self.pool,
            &mut self.shots_emb,
            &mut self.pool_emb,
            &mut self.scores,
            &mut self.workdir,
        ] {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSelectionSettings {
    pub m: usize,
    pub n: usize,
    pub normalized_ranks: bool,
    pub ppl_normalized: bool,
    pub post_processor: String,
    pub enumeration_cap: u64,
}

impl Default for ModelSelectionSettings {
    fn default() -> Self {
        Self {
            m: 8,
            n: 4,
            normalized_ranks: false,
            ppl_normalized: false,
            post_processor: "identity".into(),
            enumeration_cap: DEFAULT_ENUMERATION_CAP as u64,
        }
    }
}

impl ModelSelectionSettings {
    pub fn perplexity_mode(&self) -> PerplexityMode {
        if self.ppl_normalized {
            PerplexityMode::LengthNormalized
        } else {
            PerplexityMode::Total
        }
    }

    pub fn expert_config(&self) -> ExpertSelectionConfig {
        ExpertSelectionConfig {
            m: self.m,
            n: self.n,
            enumeration_cap: self.enumeration_cap as u128,
            rank_combination: if self.normalized_ranks {
                RankCombination::Normalized
            } else {
                RankCombination::Raw
            },
            perplexity_mode: self.perplexity_mode(),
        }
    }
}

/// MoE settings; the expert count comes from `model_selection.n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeSettings {
    pub top_k: usize,
    pub layers: usize,
    pub dim: usize,
    pub vocab: usize,
    pub seed: u64,
    /// Bank tensor seeding each expert; `{layer}` is replaced by the layer
    /// index.
    pub expert_tensor: String,
}

impl Default for MoeSettings {
    fn default() -> Self {
        let c = MoeConfig::default();
        Self {
            top_k: c.top_k,
            layers: c.layers,
            dim: c.dim,
            vocab: c.vocab,
            seed: c.seed,
            expert_tensor: "expert".into(),
        }
    }
}

impl MoeSettings {
    pub fn moe_config(&self, experts: usize) -> MoeConfig {
        MoeConfig {
            experts,
            top_k: self.top_k,
            layers: self.layers,
            dim: self.dim,
            vocab: self.vocab,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub score_aggregate: bool,
    pub select_models: bool,
    pub select_data: bool,
    pub moe_init: bool,
    pub moe_train: bool,
    pub stats: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            score_aggregate: true,
            select_models: true,
            select_data: true,
            moe_init: true,
            moe_train: true,
            stats: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// When set, the shot file must hold exactly this many samples.
    pub expected_k: Option<usize>,
    pub model_selection: ModelSelectionSettings,
    pub data_selection: SelectionConfig,
    pub moe: MoeSettings,
    pub training: TrainingConfig,
    pub stages: StageToggles,
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> std::result::Result<(), String> {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        let obj = match cur {
            Value::Object(o) => o,
            Value::Null => {
                *cur = Value::Object(Map::new());
                cur.as_object_mut().expect("just created")
            }
            _ => return Err(format!("{} is not an object", path[..i].join("."))),
        };
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        cur = obj.entry(key.clone()).or_insert(Value::Null);
    }
    Ok(())
}

/// Apply every `EXPERTFORGE_*` pair in `vars` to `doc`, in name order.
pub fn apply_env_overrides(doc: &mut Value, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.len() > ENV_PREFIX.len())
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_ascii_lowercase)
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(ForgeError::Config(format!("malformed override name {key}")));
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        set_path(doc, &path, value).map_err(|m| ForgeError::Config(format!("{key}: {m}")))?;
    }
    Ok(())
}

impl PipelineConfig {
    /// Parse `text`, apply overrides, resolve relative paths against `base`
    /// and validate.
    pub fn from_json(text: &str, base: &Path, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| ForgeError::Config(format!("line {}: {e}", e.line())))?;
        if !doc.is_object() {
            return Err(ForgeError::Config("config must be a JSON object".into()));
        }
        apply_env_overrides(&mut doc, vars)?;
        let mut cfg: Self = serde_json::from_value(doc).map_err(|e| ForgeError::Config(e.to_string()))?;
        cfg.paths.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file, applying overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| ForgeError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: expertforge_core::Error| ForgeError::Config(e.to_string());
        let ms = &self.model_selection;
        ms.expert_config().validate(None).map_err(cfg_err)?;
        if PostProcessorRegistry::default().get(&ms.post_processor).is_none() {
            return Err(ForgeError::Config(format!("unknown post-processor {:?}", ms.post_processor)));
        }
        self.data_selection.validate().map_err(cfg_err)?;
        self.moe.moe_config(ms.n).validate().map_err(cfg_err)?;
        if self.moe.expert_tensor.is_empty() {
            return Err(ForgeError::Config("moe.expert_tensor is empty".into()));
        }
        self.training.validate()?;
        if self.expected_k == Some(0) {
            return Err(ForgeError::Config("expected_k must be at least 1".into()));
        }
        if self.paths.workdir.as_os_str().is_empty() {
            return Err(ForgeError::Config("paths.workdir is required".into()));
        }
        Ok(())
    }
}
