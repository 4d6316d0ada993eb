//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS or FAIL line; exits non-zero on any
//! failure.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use expertforge::config::PipelineConfig;
use expertforge::fixture::write_fixture;
use expertforge::moe_io::TrainingConfig;
use expertforge::pipeline::{run, ACTIVATION_FILE, MANIFEST_DIR};
use expertforge_core::data_select::{kde_sample, SelectionConfig};
use expertforge_core::model_select::{select_experts, ExpertSelectionConfig};
use expertforge_core::moe::{forward, gate, loss_and_grads, Example, Mat, MoeConfig, MoeState};
use expertforge_core::scoring::perplexity;
use expertforge_core::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn expert_selection_matches_oracle() -> Outcome {
    let start = Instant::now();
    let banks = 250;
    for seed in 0..banks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bank, scores, m, n) = oracles::random_bank(&mut rng);
        let cfg = ExpertSelectionConfig { m, n, ..Default::default() };
        let got = select_experts(&bank, &scores, &cfg).map_err(|e| e.to_string())?;
        let want = oracles::select_experts_oracle(&bank, &scores, m, n);
        ensure(got.candidates == want.candidates, || format!("bank {seed}: candidates differ"))?;
        ensure(got.chosen == want.chosen, || format!("bank {seed}: chosen {:?} vs {:?}", got.chosen, want.chosen))?;
        ensure(got.tuples.len() == want.tuples.len(), || format!("bank {seed}: tuple count"))?;
        for (g, w) in got.tuples.iter().zip(&want.tuples) {
            ensure(
                g.ids == w.ids && g.rank_d == w.rank_d && g.objective == w.objective && g.mean_similarity == w.mean_similarity,
                || format!("bank {seed}: tuple {:?} differs", g.ids),
            )?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{banks} banks in {:.2}s", elapsed.as_secs_f64()))
}

fn planted_experts_recovered() -> Outcome {
    let mut hits = 0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=3);
        let (bank, scores, m, planted) = oracles::planted_bank(&mut rng, n);
        let cfg = ExpertSelectionConfig { m, n, ..Default::default() };
        let got = select_experts(&bank, &scores, &cfg).map_err(|e| e.to_string())?;
        hits += (got.chosen == planted) as usize;
    }
    ensure(hits == 10, || format!("{hits}/10 seeds"))?;
    Ok("10/10 seeds".into())
}

fn perplexity_identities() -> Outcome {
    for n in 1..64 {
        let p = perplexity(&vec![0.0; n]).map_err(|e| e.to_string())?;
        ensure(p == 1.0, || format!("perplexity of {n} zeros is {p}"))?;
    }
    let e = perplexity(&[-1.0]).map_err(|e| e.to_string())?;
    ensure((e - std::f64::consts::E).abs() <= 1e-12, || format!("perplexity([-1]) = {e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..rng.gen_range(1..30)).map(|_| rng.gen_range(-5.0..=0.0)).collect() };
        let (p, q) = (draw(&mut rng), draw(&mut rng));
        let joined: Vec<f64> = p.iter().chain(&q).copied().collect();
        let whole = perplexity(&joined).unwrap();
        let product = perplexity(&p).unwrap() * perplexity(&q).unwrap();
        worst = worst.max(((whole - product) / product).abs());
    }
    ensure(worst <= 1e-9, || format!("concatenation relative error {worst:e}"))?;
    Ok(format!("max concatenation relative error {worst:.1e}"))
}

fn data_selection_matches_oracles() -> Outcome {
    for seed in 0..100 {
        oracles::check_selection_instance(&oracles::selection_instance(seed)).map_err(|e| format!("instance {seed}: {e}"))?;
    }
    Ok("100 instances".into())
}

fn dedup_order_invariant() -> Outcome {
    for trial in 0..50 {
        oracles::check_dedup_order_invariance(5000 + trial)?;
    }
    Ok("50 trials".into())
}

fn kde_first_draw_frequency() -> Outcome {
    let shots = EmbeddingMatrix::new(vec!["s".into()], 2, vec![0.5, 0.5]).unwrap();
    let pool = EmbeddingMatrix::new(vec!["left".into(), "right".into()], 2, vec![-0.5, 0.5, 1.5, 0.5]).unwrap();
    let trials = 10_000;
    let mut left = 0;
    for seed in 0..trials {
        left += (kde_sample(&shots, &pool, 1, 1.0, seed).map_err(|e| e.to_string())?.ids[0] == "left") as usize;
    }
    let freq = left as f64 / trials as f64;
    ensure((freq - 0.5).abs() <= 0.02, || format!("frequency {freq}"))?;
    Ok(format!("frequency {freq:.4} over {trials} seeds"))
}

fn hull_membership() -> Outcome {
    for trial in 0..20 {
        oracles::check_hull_trial(trial, 1e-6).map_err(|e| format!("rotation {trial}: {e}"))?;
    }
    Ok("20 rotations at epsilon 1e-6".into())
}

fn gating_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..1000 {
        let d = rng.gen_range(1..8);
        let n = rng.gen_range(1..9);
        let k = rng.gen_range(1..=n);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w = Mat::from_vec(d, n, (0..d * n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let g = gate(&x, &w, k);
        let nonzero = g.weights.iter().filter(|v| **v != 0.0).count();
        ensure(nonzero == k, || format!("case {case}: {nonzero} nonzeros for k={k}"))?;
        let sum: f64 = g.weights.iter().sum();
        ensure((sum - 1.0).abs() <= 1e-6, || format!("case {case}: weights sum to {sum}"))?;

        // A constant extra feature shifts every logit; scaling x scales them.
        let c = rng.gen_range(-50.0..50.0);
        let mut xs = x.clone();
        xs.push(1.0);
        let mut ws = w.data.clone();
        ws.extend(std::iter::repeat(c).take(n));
        let mut shifted = gate(&xs, &Mat::from_vec(d + 1, n, ws).unwrap(), k).selected;
        let a = rng.gen_range(0.01..100.0);
        let mut scaled = gate(&x.iter().map(|v| v * a).collect::<Vec<_>>(), &w, k).selected;
        let mut base = g.selected.clone();
        base.sort();
        shifted.sort();
        scaled.sort();
        ensure(shifted == base && scaled == base, || format!("case {case}: top-k set moved"))?;
    }
    Ok("1000 cases".into())
}

fn small_moe(experts: usize, top_k: usize) -> MoeConfig {
    MoeConfig { experts, top_k, layers: 2, dim: 4, vocab: 7, seed: 23 }
}

fn toy_batch() -> Vec<Example> {
    vec![
        Example { context: vec![1, 2], target: vec![3, 4, 0] },
        Example { context: vec![6], target: vec![5, 5, 2, 1] },
    ]
}

fn gradient_check() -> Outcome {
    let state = MoeState::random(small_moe(3, 2), 0.8).map_err(|e| e.to_string())?;
    let (worst, at) = oracles::gradient_check(&state, &toy_batch(), 1e-5);
    ensure(worst < 1e-4, || format!("relative error {worst:e} at {at}"))?;
    Ok(format!("max relative error {worst:.1e}"))
}

fn moe_collapse() -> Outcome {
    let state = MoeState::random(small_moe(1, 1), 0.8).map_err(|e| e.to_string())?;
    for tok in 0..state.config.vocab {
        let got = &forward(&[tok], &state).map_err(|e| e.to_string())?.logits[0];
        let plain = oracles::plain_network_logits(&state, tok);
        let same = got.iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("token {tok}: N=1 forward differs from the plain network"))?;
    }
    let mut uniform = MoeState::random(small_moe(3, 2), 0.8).unwrap();
    uniform.params.output = Mat::zeros(4, 7);
    let loss = loss_and_grads(&toy_batch(), &uniform).map_err(|e| e.to_string())?.loss;
    let gap = (loss - 7f64.ln()).abs();
    ensure(gap <= 1e-12, || format!("uniform loss off by {gap:e}"))?;
    Ok(format!("bitwise collapse, uniform loss within {gap:.1e} of ln V"))
}

fn outputs(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                // Manifests record absolute input paths, which differ per directory.
                if !p.ends_with(MANIFEST_DIR) {
                    stack.push(p);
                }
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn toy_end_to_end() -> Outcome {
    let mut runs = Vec::new();
    let mut slowest = Duration::ZERO;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let cfg_path = write_fixture(dir.path(), 7).map_err(|e| e.to_string())?;
        let cfg = PipelineConfig::load(&cfg_path).map_err(|e| e.to_string())?;
        let start = Instant::now();
        run(&cfg).map_err(|e| e.to_string())?;
        slowest = slowest.max(start.elapsed());
        runs.push((cfg.paths.workdir.clone(), outputs(&cfg.paths.workdir)));
    }
    ensure(slowest < Duration::from_secs(60), || format!("run took {slowest:?}"))?;
    ensure(runs[0].1 == runs[1].1, || "fresh runs differ".into())?;
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(runs[0].0.join(ACTIVATION_FILE)).unwrap()).map_err(|e| e.to_string())?;
    for row in report["rates"].as_array().ok_or("no rates")? {
        let sum: f64 = row.as_array().ok_or("bad row")?.iter().filter_map(|v| v.as_f64()).sum();
        ensure((sum - 1.0).abs() <= 1e-9, || format!("activation row sums to {sum}"))?;
    }
    Ok(format!("{} files identical, run took {:.2}s", runs[0].1.len(), slowest.as_secs_f64()))
}

fn default_hyperparameters() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::from_json(r#"{"paths":{"workdir":"w"}}"#, dir.path(), Vec::new()).map_err(|e| e.to_string())?;
    let experts = ExpertSelectionConfig::default();
    let data = SelectionConfig::default();
    let training = TrainingConfig::default();
    let checks = [
        ("M", cfg.model_selection.m == 8 && experts.m == 8),
        ("N", cfg.model_selection.n == 4 && experts.n == 4),
        ("k", cfg.moe.top_k == 2),
        ("C", cfg.data_selection.budget == 1000 && data.budget == 1000),
        ("tau", cfg.data_selection.tau == 0.9 && data.tau == 0.9),
        ("max-len", cfg.training.max_len == 1024 && training.max_len == 1024),
        ("lr", cfg.training.lr == 5e-5 && training.lr == 5e-5),
    ];
    let wrong: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    ensure(wrong.is_empty(), || format!("wrong defaults: {wrong:?}"))?;
    Ok("M=8 N=4 k=2 C=1000 tau=0.9 max-len=1024 lr=5e-5".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("expert selection equals exhaustive oracle", expert_selection_matches_oracle),
        ("planted orthogonal experts recovered", planted_experts_recovered),
        ("perplexity identities", perplexity_identities),
        ("data selection equals brute-force oracles", data_selection_matches_oracles),
        ("dedup independent of input order", dedup_order_invariant),
        ("kde first-draw frequency", kde_first_draw_frequency),
        ("hull membership under rotation", hull_membership),
        ("gating contract", gating_contract),
        ("gradient check", gradient_check),
        ("single-expert collapse and uniform loss", moe_collapse),
        ("toy end-to-end run", toy_end_to_end),
        ("default hyperparameters", default_hyperparameters),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
