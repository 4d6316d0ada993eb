mod oracles;

use std::collections::BTreeMap;

use expertforge_core::model_select::{pairwise_model_similarity, select_experts, ExpertSelection, ExpertSelectionConfig};
use expertforge_core::{ModelRecord, Tensor};
use oracles::{planted_bank, random_bank, select_experts_oracle, OracleSelection};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(m: usize, n: usize) -> ExpertSelectionConfig {
    ExpertSelectionConfig { m, n, ..Default::default() }
}

fn assert_matches_oracle(got: &ExpertSelection, want: &OracleSelection) {
    assert_eq!(got.candidates, want.candidates);
    assert_eq!(got.chosen, want.chosen);
    assert_eq!(got.tuples.len(), want.tuples.len());
    for (g, w) in got.tuples.iter().zip(&want.tuples) {
        assert_eq!(g.ids, w.ids);
        assert_eq!(g.mean_similarity.to_bits(), w.mean_similarity.to_bits(), "{:?}", g.ids);
        assert_eq!(g.rank_d, w.rank_d, "{:?}", g.ids);
        assert_eq!(g.objective, w.objective, "{:?}", g.ids);
    }
}

#[test]
fn matches_exhaustive_oracle_on_random_banks() {
    for seed in 0..300 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bank, scores, m, n) = random_bank(&mut rng);
        let got = select_experts(&bank, &scores, &config(m, n)).unwrap();
        assert_matches_oracle(&got, &select_experts_oracle(&bank, &scores, m, n));
    }
}

#[test]
fn recovers_planted_orthogonal_experts() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=3);
        let (bank, scores, m, planted) = planted_bank(&mut rng, n);
        let got = select_experts(&bank, &scores, &config(m, n)).unwrap();
        assert_eq!(got.chosen, planted, "seed {seed}");
    }
}

fn scaled(r: &ModelRecord, by: f32) -> ModelRecord {
    let tensors: BTreeMap<String, Tensor> = r
        .tensors
        .iter()
        .map(|(k, t)| (k.clone(), Tensor::new(t.rows(), t.cols(), t.data().iter().map(|v| v * by).collect()).unwrap()))
        .collect();
    ModelRecord::new(r.model_id.clone(), tensors)
}

proptest! {
    #[test]
    fn selection_ignores_bank_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut bank, mut scores, m, n) = random_bank(&mut rng);
        let before = select_experts(&bank, &scores, &config(m, n)).unwrap();
        bank.shuffle(&mut rng);
        scores.shuffle(&mut rng);
        prop_assert_eq!(select_experts(&bank, &scores, &config(m, n)).unwrap(), before);
    }

    #[test]
    fn model_cosine_is_symmetric_and_scale_invariant(seed in any::<u64>(), a in 0.01f32..100.0, b in 0.01f32..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bank, _, _, _) = random_bank(&mut rng);
        let (x, y) = (&bank[0], &bank[1]);
        let xy = pairwise_model_similarity(x, y).unwrap().cosine;
        let yx = pairwise_model_similarity(y, x).unwrap().cosine;
        prop_assert_eq!(xy, yx);
        let s = pairwise_model_similarity(&scaled(x, a), &scaled(y, b)).unwrap().cosine;
        prop_assert!((s - xy).abs() < 1e-6, "{} vs {}", s, xy);
        prop_assert!((-1.0..=1.0).contains(&xy));
    }
}
