//! Resumable end-to-end pipeline.
//!
//! Stages run in a fixed order. Each writes `manifests/<stage>.json` with
//! the SHA-256 of every input and output plus the slice of config it
//! depends on. A stage whose recorded hashes and config still match is
//! skipped.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use expertforge_core::data_select::{select_data, DataSelection, SelectionConfig};
use expertforge_core::model_select::{select_experts, ExpertSelection, ExpertSelectionConfig};
use expertforge_core::moe::init_from_bank;
use expertforge_core::scoring::{score_models, ModelScore, PerplexityMode, PostProcessorRegistry};
use expertforge_core::{EmbeddingMatrix, InstructionSample, ModelRecord, SelectionReport, ShotSet};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{ForgeError, Result};
use crate::io::embeddings::{ids_path, read_embeddings};
use crate::io::instructions::{read_instruction_samples, read_instruction_set, write_instruction_samples};
use crate::io::scores::{read_model_scores, read_score_table, write_model_scores};
use crate::io::tensors::{bank_files, read_bank};
use crate::moe_io::{
    activation_report, load_state, save_state, train, MoeManifest, STATE_CONFIG_FILE, STATE_TENSOR_FILE,
};

pub const MODEL_SCORES_FILE: &str = "model_scores.csv";
pub const EXPERTS_FILE: &str = "experts.json";
pub const DATA_REPORT_FILE: &str = "data_selection.json";
pub const AUGMENTATION_FILE: &str = "d_a.jsonl";
pub const MOE_INIT_DIR: &str = "moe_init";
pub const MOE_DIR: &str = "moe";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const ACTIVATION_FILE: &str = "activation.json";
pub const REPORT_FILE: &str = "selection_report.json";
pub const MANIFEST_DIR: &str = "manifests";

pub(crate) fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| ForgeError::io(dir, e))?;
    }
    fs::write(path, b).map_err(|e| ForgeError::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| ForgeError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ForgeError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn invalid(path: &Path) -> impl FnOnce(expertforge_core::Error) -> ForgeError + '_ {
    move |source| ForgeError::Invalid {
        path: path.to_path_buf(),
        source,
    }
}

fn check_k(shots: &ShotSet, path: &Path, expected_k: Option<usize>) -> Result<()> {
    shots.require_nonempty().map_err(invalid(path))?;
    match expected_k {
        Some(k) if k != shots.k() => Err(invalid(path)(expertforge_core::Error::Validation(format!(
            "expected {k} shots, found {}",
            shots.k()
        )))),
        _ => Ok(()),
    }
}

/// Reasoning perplexity, accuracy and ranks for every model in the score
/// table.
pub fn aggregate_scores(
    scores: &Path,
    shots: &Path,
    post_processor: &str,
    mode: PerplexityMode,
    expected_k: Option<usize>,
) -> Result<Vec<ModelScore>> {
    let registry = PostProcessorRegistry::default();
    let post = registry
        .get(post_processor)
        .ok_or_else(|| ForgeError::Config(format!("unknown post-processor {post_processor:?}")))?;
    let shot_set = read_instruction_set(shots)?;
    check_k(&shot_set, shots, expected_k)?;
    let table = read_score_table(scores)?;
    let ids = table.model_ids();
    score_models(&table, &shot_set, &ids, post, mode).map_err(invalid(scores))
}

pub fn choose_experts(bank: &[ModelRecord], scores: &[ModelScore], cfg: &ExpertSelectionConfig) -> Result<ExpertSelection> {
    Ok(select_experts(bank, scores, cfg)?)
}

/// Rows of `emb` reordered to match `samples`; both must hold the same ids.
fn align(emb: EmbeddingMatrix, emb_path: &Path, samples: &[InstructionSample]) -> Result<EmbeddingMatrix> {
    let sample_ids: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let extra: Vec<String> = emb
        .ids()
        .iter()
        .filter(|id| !sample_ids.contains(id.as_str()))
        .cloned()
        .collect();
    if !extra.is_empty() {
        return Err(invalid(emb_path)(expertforge_core::Error::Incomplete {
            what: "samples for embedding rows".into(),
            missing: extra,
        }));
    }
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    emb.select(&ids).map_err(invalid(emb_path))
}

/// Sim-div data selection. Returns the audit trail and the selected pool
/// samples in selection order.
pub fn choose_data(
    shots: &Path,
    pool: &Path,
    shots_emb: &Path,
    pool_emb: &Path,
    cfg: &SelectionConfig,
    expected_k: Option<usize>,
) -> Result<(DataSelection, Vec<InstructionSample>)> {
    let shot_set = read_instruction_set(shots)?;
    check_k(&shot_set, shots, expected_k)?;
    let pool_samples = read_instruction_samples(pool)?;
    let u_k = align(read_embeddings(shots_emb)?, shots_emb, shot_set.samples())?;
    let u_s = align(read_embeddings(pool_emb)?, pool_emb, &pool_samples)?;
    let selection = select_data(&u_k, &u_s, cfg)?;
    let by_id: std::collections::HashMap<&str, &InstructionSample> =
        pool_samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let chosen = selection
        .selected
        .iter()
        .map(|s| by_id[s.id.as_str()].clone())
        .collect();
    Ok((selection, chosen))
}

/// Bank records for `ids`, in the given order.
pub fn bank_subset(bank_dir: &Path, ids: &[String]) -> Result<Vec<ModelRecord>> {
    let bank = read_bank(bank_dir)?;
    ids.iter()
        .map(|id| {
            bank.iter().find(|m| &m.model_id == id).cloned().ok_or_else(|| {
                ForgeError::Core(expertforge_core::Error::Incomplete {
                    what: format!("bank models in {}", bank_dir.display()),
                    missing: vec![id.clone()],
                })
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ScoreAggregate,
    SelectModels,
    SelectData,
    MoeInit,
    MoeTrain,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::ScoreAggregate,
        Stage::SelectModels,
        Stage::SelectData,
        Stage::MoeInit,
        Stage::MoeTrain,
        Stage::Stats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::ScoreAggregate => "score_aggregate",
            Stage::SelectModels => "select_models",
            Stage::SelectData => "select_data",
            Stage::MoeInit => "moe_init",
            Stage::MoeTrain => "moe_train",
            Stage::Stats => "stats",
        }
    }

    fn enabled(self, cfg: &PipelineConfig) -> bool {
        let t = &cfg.stages;
        match self {
            Stage::ScoreAggregate => t.score_aggregate,
            Stage::SelectModels => t.select_models,
            Stage::SelectData => t.select_data,
            Stage::MoeInit => t.moe_init,
            Stage::MoeTrain => t.moe_train,
            Stage::Stats => t.stats,
        }
    }
}

struct StagePlan {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    config: Value,
}

fn embedding_inputs(p: &Path) -> Vec<PathBuf> {
    let sidecar = ids_path(p);
    if sidecar.exists() {
        vec![p.to_path_buf(), sidecar]
    } else {
        vec![p.to_path_buf()]
    }
}

fn state_files(dir: &Path) -> Vec<PathBuf> {
    vec![dir.join(STATE_CONFIG_FILE), dir.join(STATE_TENSOR_FILE)]
}

fn plan(stage: Stage, cfg: &PipelineConfig, work: &Path) -> Result<StagePlan> {
    let p = &cfg.paths;
    let ms = &cfg.model_selection;
    Ok(match stage {
        Stage::ScoreAggregate => StagePlan {
            inputs: vec![p.scores.clone(), p.shots.clone()],
            outputs: vec![work.join(MODEL_SCORES_FILE)],
            config: json!({
                "post_processor": ms.post_processor,
                "perplexity_mode": ms.perplexity_mode(),
                "expected_k": cfg.expected_k,
            }),
        },
        Stage::SelectModels => {
            let mut inputs = bank_files(&p.bank_dir)?;
            inputs.push(work.join(MODEL_SCORES_FILE));
            StagePlan {
                inputs,
                outputs: vec![work.join(EXPERTS_FILE)],
                config: json!(ms.expert_config()),
            }
        }
        Stage::SelectData => {
            let mut inputs = vec![p.shots.clone(), p.pool.clone()];
            inputs.extend(embedding_inputs(&p.shots_emb));
            inputs.extend(embedding_inputs(&p.pool_emb));
            StagePlan {
                inputs,
                outputs: vec![work.join(DATA_REPORT_FILE), work.join(AUGMENTATION_FILE)],
                config: json!({ "selection": cfg.data_selection, "expected_k": cfg.expected_k }),
            }
        }
        Stage::MoeInit => {
            let mut inputs = bank_files(&p.bank_dir)?;
            inputs.push(work.join(EXPERTS_FILE));
            StagePlan {
                inputs,
                outputs: state_files(&work.join(MOE_INIT_DIR)),
                config: json!({ "moe": cfg.moe, "experts": ms.n }),
            }
        }
        Stage::MoeTrain => {
            let mut inputs = state_files(&work.join(MOE_INIT_DIR));
            inputs.push(work.join(AUGMENTATION_FILE));
            let mut outputs = state_files(&work.join(MOE_DIR));
            outputs.push(work.join(TRAIN_LOG_FILE));
            StagePlan {
                inputs,
                outputs,
                config: json!(cfg.training),
            }
        }
        Stage::Stats => {
            let mut inputs = state_files(&work.join(MOE_DIR));
            inputs.push(p.shots.clone());
            StagePlan {
                inputs,
                outputs: vec![work.join(ACTIVATION_FILE)],
                config: json!({ "max_len": cfg.training.max_len }),
            }
        }
    })
}

fn execute(stage: Stage, cfg: &PipelineConfig, work: &Path) -> Result<()> {
    let p = &cfg.paths;
    let ms = &cfg.model_selection;
    match stage {
        Stage::ScoreAggregate => {
            let scores = aggregate_scores(&p.scores, &p.shots, &ms.post_processor, ms.perplexity_mode(), cfg.expected_k)?;
            write_model_scores(&work.join(MODEL_SCORES_FILE), &scores)
        }
        Stage::SelectModels => {
            let bank = read_bank(&p.bank_dir)?;
            let scores = read_model_scores(&work.join(MODEL_SCORES_FILE))?;
            let sel = choose_experts(&bank, &scores, &ms.expert_config())?;
            info!("chosen experts: {}", sel.chosen.join(", "));
            write_json(&work.join(EXPERTS_FILE), &sel)
        }
        Stage::SelectData => {
            let (sel, chosen) = choose_data(&p.shots, &p.pool, &p.shots_emb, &p.pool_emb, &cfg.data_selection, cfg.expected_k)?;
            for w in &sel.warnings {
                log::warn!("{w}");
            }
            info!("selected {} of {} pool samples", chosen.len(), sel.pool_size);
            write_json(&work.join(DATA_REPORT_FILE), &sel)?;
            write_instruction_samples(&work.join(AUGMENTATION_FILE), &chosen)
        }
        Stage::MoeInit => {
            let sel: ExpertSelection = read_json(&work.join(EXPERTS_FILE))?;
            let records = bank_subset(&p.bank_dir, &sel.chosen)?;
            let moe_cfg = cfg.moe.moe_config(sel.chosen.len());
            let state = init_from_bank(&records, moe_cfg, &cfg.moe.expert_tensor)?;
            let manifest = MoeManifest {
                config: moe_cfg,
                expert_ids: sel.chosen.clone(),
                expert_tensor: cfg.moe.expert_tensor.clone(),
            };
            save_state(&work.join(MOE_INIT_DIR), &manifest, &state)
        }
        Stage::MoeTrain => {
            let (manifest, mut state) = load_state(&work.join(MOE_INIT_DIR))?;
            let data = read_instruction_samples(&work.join(AUGMENTATION_FILE))?;
            let log = train(&mut state, &data, &cfg.training)?;
            if let (Some(first), Some(last)) = (log.epoch_losses.first(), log.epoch_losses.last()) {
                info!("training loss {first:.6} -> {last:.6} over {} examples", log.examples);
            }
            save_state(&work.join(MOE_DIR), &manifest, &state)?;
            write_json(&work.join(TRAIN_LOG_FILE), &log)
        }
        Stage::Stats => {
            let (manifest, state) = load_state(&work.join(MOE_DIR))?;
            let shots = read_instruction_set(&p.shots)?;
            let report = activation_report(&state, &manifest.expert_ids, shots.samples(), cfg.training.max_len)?;
            write_json(&work.join(ACTIVATION_FILE), &report)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub config: Value,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| ForgeError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Paths inside `work` are recorded relative to it.
fn display_path(path: &Path, work: &Path) -> String {
    path.strip_prefix(work).unwrap_or(path).to_string_lossy().into_owned()
}

fn digests(paths: &[PathBuf], work: &Path) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: display_path(p, work),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

pub fn manifest_path(work: &Path, stage: Stage) -> PathBuf {
    work.join(MANIFEST_DIR).join(format!("{}.json", stage.name()))
}

/// True when the stored manifest matches current inputs, outputs and config.
fn up_to_date(stage: Stage, plan: &StagePlan, work: &Path) -> bool {
    let Ok(stored) = read_json::<Manifest>(&manifest_path(work, stage)) else {
        return false;
    };
    let current_in = digests(&plan.inputs, work);
    let current_out = digests(&plan.outputs, work);
    matches!((current_in, current_out), (Ok(i), Ok(o))
        if stored.stage == stage && stored.inputs == i && stored.outputs == o && stored.config == plan.config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub workdir: PathBuf,
    pub stages: Vec<(Stage, StageStatus)>,
}

impl RunSummary {
    pub fn status(&self, stage: Stage) -> Option<StageStatus> {
        self.stages.iter().find(|(s, _)| *s == stage).map(|(_, st)| *st)
    }
}

fn run_stage(stage: Stage, cfg: &PipelineConfig, work: &Path) -> Result<StageStatus> {
    let plan = plan(stage, cfg, work)?;
    if up_to_date(stage, &plan, work) {
        info!("{}: up to date, skipped", stage.name());
        return Ok(StageStatus::Skipped);
    }
    for input in &plan.inputs {
        if !input.exists() {
            return Err(ForgeError::io(
                input,
                std::io::Error::new(std::io::ErrorKind::NotFound, "stage input missing"),
            ));
        }
    }
    let inputs = digests(&plan.inputs, work)?;
    info!("{}: running", stage.name());
    execute(stage, cfg, work)?;
    let manifest = Manifest {
        stage,
        inputs,
        outputs: digests(&plan.outputs, work)?,
        config: plan.config,
    };
    write_json(&manifest_path(work, stage), &manifest)?;
    Ok(StageStatus::Ran)
}

/// Combined audit trail from the expert and data selection outputs that
/// exist in `work`.
pub fn write_selection_report(work: &Path) -> Result<Option<SelectionReport>> {
    let experts = work.join(EXPERTS_FILE);
    let data = work.join(DATA_REPORT_FILE);
    if !experts.exists() && !data.exists() {
        return Ok(None);
    }
    let report = SelectionReport {
        experts: experts.exists().then(|| read_json(&experts)).transpose()?,
        data: data.exists().then(|| read_json(&data)).transpose()?,
    };
    write_json(&work.join(REPORT_FILE), &report)?;
    Ok(Some(report))
}

/// Run every enabled stage in order. A failing stage aborts the run with an
/// error naming it.
pub fn run(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let work = cfg.paths.workdir.clone();
    fs::create_dir_all(&work).map_err(|e| ForgeError::io(&work, e))?;
    let mut stages = Vec::new();
    for stage in Stage::ALL {
        if !stage.enabled(cfg) {
            stages.push((stage, StageStatus::Disabled));
            continue;
        }
        let status = run_stage(stage, cfg, &work).map_err(|source| ForgeError::Stage {
            stage: stage.name().into(),
            source: Box::new(source),
        })?;
        stages.push((stage, status));
    }
    write_selection_report(&work)?;
    Ok(RunSummary { workdir: work, stages })
}

/// `repeats` independent runs in `workdir/repeat-<r>`, with every seed
/// offset by `r`. Results are not aggregated.
pub fn run_repeated(cfg: &PipelineConfig, repeats: usize) -> Result<Vec<RunSummary>> {
    if repeats <= 1 {
        return Ok(vec![run(cfg)?]);
    }
    (0..repeats)
        .map(|r| {
            let mut c = cfg.clone();
            c.paths.workdir = cfg.paths.workdir.join(format!("repeat-{r}"));
            c.data_selection.seed = cfg.data_selection.seed.wrapping_add(r as u64);
            c.moe.seed = cfg.moe.seed.wrapping_add(r as u64);
            c.training.seed = cfg.training.seed.wrapping_add(r as u64);
            run(&c)
        })
        .collect()
}
