//! Small synthetic inputs for the whole pipeline: five bank models, twenty
//! shots, a 200-item pool with near-duplicates, embeddings and scores.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use expertforge_core::{EmbeddingMatrix, InstructionSample, ModelRecord, ScoreRecord, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{ForgeError, Result};
use crate::io::embeddings::write_embeddings;
use crate::io::instructions::write_instruction_samples;
use crate::io::scores::write_score_records;
use crate::io::tensors::write_tensor_archive;

pub const MODELS: usize = 5;
pub const SHOTS: usize = 20;
pub const POOL: usize = 200;
/// Pool items that are near-copies of an earlier item.
pub const DUPLICATES: usize = 20;
pub const TENSOR_DIM: usize = 8;
pub const EMBEDDING_DIM: usize = 16;
pub const CONFIG_FILE: &str = "config.json";

const CHOICES: [&str; 4] = ["A", "B", "C", "D"];
const TOPICS: [&str; 6] = ["heat", "plants", "magnets", "weather", "rocks", "light"];

fn question(rng: &mut ChaCha8Rng, topic: &str, n: usize) -> (String, String) {
    let opts: Vec<String> = (0..4).map(|i| format!("{} option {}", topic, n * 4 + i)).collect();
    let right = rng.gen_range(0..4);
    let body = format!(
        "Question: Which statement about {topic} is true in case {n}? {}",
        CHOICES
            .iter()
            .zip(&opts)
            .map(|(c, o)| format!("{c}. {o}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    (body, format!("{}. {}", CHOICES[right], opts[right]))
}

fn unit_noise(rng: &mut ChaCha8Rng, dim: usize, scale: f32) -> Vec<f32> {
    (0..dim).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Writes the fixture into `dir` and returns the path of its config file.
pub fn write_fixture(dir: &Path, seed: u64) -> Result<PathBuf> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank_dir = dir.join("bank");
    fs::create_dir_all(&bank_dir).map_err(|e| ForgeError::io(&bank_dir, e))?;

    let model_ids: Vec<String> = (0..MODELS).map(|i| format!("lora-{}", (b'a' + i as u8) as char)).collect();
    for id in &model_ids {
        let data = unit_noise(&mut rng, TENSOR_DIM * TENSOR_DIM, 0.3);
        let mut tensors = BTreeMap::new();
        tensors.insert("expert".to_string(), Tensor::new(TENSOR_DIM, TENSOR_DIM, data)?);
        let mut rec = ModelRecord::new(id.clone(), tensors);
        rec.meta.insert("source".into(), "fixture".into());
        write_tensor_archive(&bank_dir.join(format!("{id}.safetensors")), &rec)?;
    }

    let task: Vec<f32> = unit_noise(&mut rng, EMBEDDING_DIM, 1.0);
    let near_task = |rng: &mut ChaCha8Rng, spread: f32| -> Vec<f32> {
        task.iter().zip(unit_noise(rng, EMBEDDING_DIM, spread)).map(|(t, n)| t + n).collect()
    };

    let mut shots = Vec::new();
    let mut shot_rows = Vec::new();
    for i in 0..SHOTS {
        let (instruction, output) = question(&mut rng, TOPICS[i % 2], i);
        shots.push(InstructionSample {
            id: format!("shot-{i:02}"),
            instruction,
            input: String::new(),
            output,
            cot_output: None,
        });
        shot_rows.extend(near_task(&mut rng, 0.4));
    }

    let mut pool: Vec<InstructionSample> = Vec::new();
    let mut pool_rows: Vec<f32> = Vec::new();
    let originals = POOL - DUPLICATES;
    for i in 0..POOL {
        let (sample, row) = if i < originals {
            let topic = TOPICS[i % TOPICS.len()];
            let (instruction, output) = question(&mut rng, topic, 100 + i);
            let input = if i % 3 == 0 { format!("Context: {topic} facts.") } else { String::new() };
            let row = if i % TOPICS.len() < 2 {
                near_task(&mut rng, 0.8)
            } else {
                unit_noise(&mut rng, EMBEDDING_DIM, 1.0)
            };
            (
                InstructionSample {
                    id: format!("pool-{i:03}"),
                    instruction,
                    input,
                    output,
                    cot_output: None,
                },
                row,
            )
        } else {
            let src = rng.gen_range(0..originals);
            let mut copy = pool[src].clone();
            copy.id = format!("pool-{i:03}");
            let row: Vec<f32> = pool_rows[src * EMBEDDING_DIM..(src + 1) * EMBEDDING_DIM]
                .iter()
                .zip(unit_noise(&mut rng, EMBEDDING_DIM, 0.01))
                .map(|(v, n)| v + n)
                .collect();
            (copy, row)
        };
        pool.push(sample);
        pool_rows.extend(row);
    }

    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| ForgeError::io(&data_dir, e))?;
    write_instruction_samples(&data_dir.join("shots.jsonl"), &shots)?;
    write_instruction_samples(&data_dir.join("pool.jsonl"), &pool)?;
    let ids = |s: &[InstructionSample]| s.iter().map(|x| x.id.clone()).collect::<Vec<_>>();
    write_embeddings(
        &data_dir.join("shots.emb"),
        &EmbeddingMatrix::new(ids(&shots), EMBEDDING_DIM, shot_rows)?,
    )?;
    write_embeddings(
        &data_dir.join("pool.emb"),
        &EmbeddingMatrix::new(ids(&pool), EMBEDDING_DIM, pool_rows)?,
    )?;

    // Model i gets per-token log-probabilities around -(0.2 + 0.15 i) and
    // answers correctly with probability 0.9 - 0.12 i, varied by the rng.
    let mut records = Vec::new();
    for (m, id) in model_ids.iter().enumerate() {
        for s in &shots {
            let len = rng.gen_range(3..7);
            let centre = 0.2 + 0.15 * m as f64;
            let token_logprobs = (0..len).map(|_| -(centre * rng.gen_range(0.5..1.5))).collect();
            let correct = rng.gen_bool(0.9 - 0.12 * m as f64);
            let letter = &s.output[..1];
            let response = if correct {
                s.output.clone()
            } else {
                let wrong = CHOICES.iter().find(|c| **c != letter).expect("four choices");
                format!("{wrong}. something else")
            };
            records.push(ScoreRecord {
                model_id: id.clone(),
                sample_id: s.id.clone(),
                token_logprobs,
                exact_match: None,
                raw_response: Some(response),
            });
        }
    }
    write_score_records(&data_dir.join("scores.jsonl"), &records)?;

    let config = json!({
        "paths": {
            "bank_dir": "bank",
            "shots": "data/shots.jsonl",
            "pool": "data/pool.jsonl",
            "shots_emb": "data/shots.emb",
            "pool_emb": "data/pool.emb",
            "scores": "data/scores.jsonl",
            "workdir": "work"
        },
        "expected_k": SHOTS,
        "model_selection": { "m": 4, "n": 3, "post_processor": "first-choice-letter" },
        "data_selection": { "budget": 60, "tau": 0.9, "sampler": "cosine" },
        "moe": { "top_k": 2, "layers": 2, "dim": TENSOR_DIM, "vocab": 64, "seed": seed, "expert_tensor": "expert" },
        "training": { "epochs": 5, "lr": 5e-5, "batch_size": 2, "grad_accumulation": 16, "warmup_steps": 2, "max_len": 1024, "seed": seed }
    });
    let path = dir.join(CONFIG_FILE);
    let mut bytes = serde_json::to_vec_pretty(&config).expect("json value");
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(|e| ForgeError::io(&path, e))?;
    Ok(path)
}
