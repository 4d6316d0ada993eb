//! `expertforge` command line.
//!
//! Numeric options left unset fall back to the `--config` file when one is
//! given, and to the built-in defaults otherwise.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use expertforge_core::data_select::Sampler;
use expertforge_core::model_select::ExpertSelection;
use expertforge_core::moe::init_from_bank;
use expertforge_core::SelectionReport;

use crate::config::PipelineConfig;
use crate::cot::write_cot_prompts;
use crate::error::{ForgeError, Result};
use crate::fixture::write_fixture;
use crate::io::instructions::{read_instruction_samples, read_instruction_set, write_instruction_samples};
use crate::io::scores::{read_model_scores, write_model_scores};
use crate::io::tensors::read_bank;
use crate::moe_io::{activation_report, load_state, save_state, train, MoeManifest, Optimizer, Schedule};
use crate::pipeline::{aggregate_scores, bank_subset, choose_data, choose_experts, read_json, run_repeated, write_json};

#[derive(Debug, Parser)]
#[command(name = "expertforge", version, about = "K-shot guided expert and data selection with a toy mixture-of-experts")]
pub struct Cli {
    /// Pipeline config; supplies defaults for unset options.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-model reasoning perplexity, accuracy and ranks as CSV.
    ScoreAggregate(ScoreAggregateArgs),
    /// Choose N experts from the bank.
    SelectModels(SelectModelsArgs),
    /// Choose augmentation data from the open pool.
    SelectData(SelectDataArgs),
    /// Build, train or inspect the mixture-of-experts.
    MoeSim {
        #[command(subcommand)]
        action: MoeAction,
    },
    /// Emit rationale-expansion prompts, one JSON line per sample.
    CotPrompt(CotPromptArgs),
    /// Run the configured pipeline.
    Run(RunArgs),
    /// Write the synthetic toy fixture.
    Fixture(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct ScoringArgs {
    /// Post-processor applied to responses and answers before matching.
    #[arg(long)]
    pub post_processor: Option<String>,
    /// Divide each sample's log-likelihood by its token count.
    #[arg(long)]
    pub ppl_normalized: bool,
    #[arg(long)]
    pub expected_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ScoreAggregateArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub shots: PathBuf,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectModelsArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// Score table (JSON-Lines, needs `--shots`) or model score CSV.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub shots: Option<PathBuf>,
    #[arg(long = "M")]
    pub m: Option<usize>,
    #[arg(long = "N")]
    pub n: Option<usize>,
    /// Divide each rank by its range before summing.
    #[arg(long)]
    pub normalized_ranks: bool,
    #[arg(long)]
    pub enumeration_cap: Option<u64>,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectDataArgs {
    #[arg(long)]
    pub shots: PathBuf,
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub shots_emb: PathBuf,
    #[arg(long)]
    pub pool_emb: PathBuf,
    /// cosine, hull or kde.
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long = "C")]
    pub c: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub expected_k: Option<usize>,
    /// Selected samples, JSON-Lines.
    #[arg(long)]
    pub out: PathBuf,
    /// Full selection audit trail, JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum MoeAction {
    /// Seed experts from the chosen bank models.
    Init(MoeInitArgs),
    /// Fine-tune on instruction data.
    Train(MoeTrainArgs),
    /// Per-layer expert activation rates.
    Stats(MoeStatsArgs),
}

#[derive(Debug, Args)]
pub struct MoeInitArgs {
    /// Expert selection or combined selection report.
    #[arg(long)]
    pub experts: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub expert_tensor: Option<String>,
    /// State directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MoeTrainArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accumulation: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<Optimizer>,
    #[arg(long, value_enum)]
    pub schedule: Option<Schedule>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// State directory for the trained model.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MoeStatsArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Defaults to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CotPromptArgs {
    #[arg(long)]
    pub shots: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Independent runs with offset seeds, each in its own subdirectory.
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn settings(config: Option<&Path>) -> Result<PipelineConfig> {
    match config {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_expert_selection(path: &Path) -> Result<ExpertSelection> {
    let report: SelectionReport = read_json(path)?;
    match report.experts {
        Some(e) => Ok(e),
        None => read_json(path),
    }
}

fn score_mode(scoring: &ScoringArgs, cfg: &mut PipelineConfig) -> Option<usize> {
    if let Some(p) = &scoring.post_processor {
        cfg.model_selection.post_processor = p.clone();
    }
    cfg.model_selection.ppl_normalized |= scoring.ppl_normalized;
    scoring.expected_k.or(cfg.expected_k)
}

/// Runs the parsed command.
/// Writes one line to stdout. A closed pipe (`| head`) is not an error.
fn emit(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

pub fn execute(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::ScoreAggregate(a) => {
            let mut cfg = settings(config)?;
            let k = score_mode(&a.scoring, &mut cfg);
            let ms = &cfg.model_selection;
            let scores = aggregate_scores(&a.scores, &a.shots, &ms.post_processor, ms.perplexity_mode(), k)?;
            write_model_scores(&a.out, &scores)
        }
        Command::SelectModels(a) => {
            let mut cfg = settings(config)?;
            let k = score_mode(&a.scoring, &mut cfg);
            let ms = &mut cfg.model_selection;
            ms.m = a.m.unwrap_or(ms.m);
            ms.n = a.n.unwrap_or(ms.n);
            ms.normalized_ranks |= a.normalized_ranks;
            ms.enumeration_cap = a.enumeration_cap.unwrap_or(ms.enumeration_cap);
            let selection_cfg = ms.expert_config();
            selection_cfg
                .validate(None)
                .map_err(|e| ForgeError::Config(e.to_string()))?;
            let scores = if a.scores.extension().is_some_and(|e| e == "csv") {
                if a.scoring.ppl_normalized {
                    return Err(ForgeError::Config(
                        "--ppl-normalized needs the raw score table, not a CSV".into(),
                    ));
                }
                read_model_scores(&a.scores)?
            } else {
                let shots = a
                    .shots
                    .as_deref()
                    .ok_or_else(|| ForgeError::Config("--shots is required with a score table".into()))?;
                aggregate_scores(&a.scores, shots, &ms.post_processor, ms.perplexity_mode(), k)?
            };
            let bank = read_bank(&a.bank)?;
            let sel = choose_experts(&bank, &scores, &selection_cfg)?;
            emit(&sel.chosen.join(" "));
            write_json(&a.out, &sel)
        }
        Command::SelectData(a) => {
            let cfg = settings(config)?;
            let mut sc = cfg.data_selection;
            if let Some(name) = &a.sampler {
                sc.sampler = Sampler::from_name(name)
                    .ok_or_else(|| ForgeError::Config(format!("unknown sampler {name:?}")))?;
            }
            sc.budget = a.c.unwrap_or(sc.budget);
            sc.tau = a.tau.unwrap_or(sc.tau);
            sc.gamma = a.gamma.unwrap_or(sc.gamma);
            sc.seed = a.seed.unwrap_or(sc.seed);
            sc.epsilon = a.epsilon.unwrap_or(sc.epsilon);
            sc.validate().map_err(|e| ForgeError::Config(e.to_string()))?;
            let k = a.expected_k.or(cfg.expected_k);
            let (sel, chosen) = choose_data(&a.shots, &a.pool, &a.shots_emb, &a.pool_emb, &sc, k)?;
            for w in &sel.warnings {
                log::warn!("{w}");
            }
            write_instruction_samples(&a.out, &chosen)?;
            if let Some(r) = &a.report {
                write_json(r, &sel)?;
            }
            Ok(())
        }
        Command::MoeSim { action } => {
            let cfg = settings(config)?;
            match action {
                MoeAction::Init(a) => {
                    let mut m = cfg.moe.clone();
                    m.top_k = a.top_k.unwrap_or(m.top_k);
                    m.layers = a.layers.unwrap_or(m.layers);
                    m.dim = a.dim.unwrap_or(m.dim);
                    m.vocab = a.vocab.unwrap_or(m.vocab);
                    m.seed = a.seed.unwrap_or(m.seed);
                    if let Some(t) = a.expert_tensor {
                        m.expert_tensor = t;
                    }
                    let sel = load_expert_selection(&a.experts)?;
                    let moe_cfg = m.moe_config(sel.chosen.len());
                    moe_cfg.validate().map_err(|e| ForgeError::Config(e.to_string()))?;
                    let records = bank_subset(&a.bank, &sel.chosen)?;
                    let state = init_from_bank(&records, moe_cfg, &m.expert_tensor)?;
                    let manifest = MoeManifest {
                        config: moe_cfg,
                        expert_ids: sel.chosen,
                        expert_tensor: m.expert_tensor,
                    };
                    save_state(&a.out, &manifest, &state)
                }
                MoeAction::Train(a) => {
                    let mut t = cfg.training;
                    t.epochs = a.epochs.unwrap_or(t.epochs);
                    t.lr = a.lr.unwrap_or(t.lr);
                    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
                    t.grad_accumulation = a.grad_accumulation.unwrap_or(t.grad_accumulation);
                    t.optimizer = a.optimizer.unwrap_or(t.optimizer);
                    t.schedule = a.schedule.unwrap_or(t.schedule);
                    t.warmup_steps = a.warmup_steps.unwrap_or(t.warmup_steps);
                    t.max_len = a.max_len.unwrap_or(t.max_len);
                    t.seed = a.seed.unwrap_or(t.seed);
                    t.validate()?;
                    let (manifest, mut state) = load_state(&a.state)?;
                    let data = read_instruction_samples(&a.data)?;
                    let log = train(&mut state, &data, &t)?;
                    save_state(&a.out, &manifest, &state)?;
                    if let Some(p) = &a.log {
                        write_json(p, &log)?;
                    }
                    Ok(())
                }
                MoeAction::Stats(a) => {
                    let (manifest, state) = load_state(&a.state)?;
                    let data = read_instruction_samples(&a.data)?;
                    let max_len = a.max_len.unwrap_or(cfg.training.max_len);
                    let report = activation_report(&state, &manifest.expert_ids, &data, max_len)?;
                    match &a.out {
                        Some(p) => write_json(p, &report),
                        None => {
                            emit(&serde_json::to_string_pretty(&report).expect("serializable"));
                            Ok(())
                        }
                    }
                }
            }
        }
        Command::CotPrompt(a) => {
            let shots = read_instruction_set(&a.shots)?;
            write_cot_prompts(&a.out, shots.samples())
        }
        Command::Run(a) => {
            let path = config.ok_or_else(|| ForgeError::Config("run needs --config".into()))?;
            let cfg = PipelineConfig::load(path)?;
            if a.repeat == 0 {
                return Err(ForgeError::Config("--repeat must be at least 1".into()));
            }
            for summary in run_repeated(&cfg, a.repeat)? {
                for (stage, status) in &summary.stages {
                    emit(&format!("{}\t{}\t{:?}", summary.workdir.display(), stage.name(), status));
                }
            }
            Ok(())
        }
        Command::Fixture(a) => {
            let cfg = write_fixture(&a.out, a.seed)?;
            emit(&cfg.display().to_string());
            Ok(())
        }
    }
}

fn report(err: &ForgeError) {
    let mut msg = format!("error: {err}");
    let mut source = std::error::Error::source(err);
    while let Some(s) = source {
        let text = s.to_string();
        if !msg.ends_with(&text) {
            msg.push_str(&format!("\n  caused by: {text}"));
        }
        source = s.source();
    }
    eprintln!("{msg}");
}

/// Entry point: 0 on success, 2 for configuration errors, 3 for failures
/// while running.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
