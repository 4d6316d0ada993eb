//! Brute-force reference implementations and random instance generators.
//! Written from the definitions, without reusing library internals, and
//! shared by the core property tests and the acceptance suite.

#![allow(dead_code)]

use std::collections::BTreeMap;

use expertforge_core::moe::{loss_and_grads, Example, MoeState};
use expertforge_core::scoring::ModelScore;
use expertforge_core::{EmbeddingMatrix, ModelRecord, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- experts

fn pair_cosine(a: &ModelRecord, b: &ModelRecord) -> f64 {
    let mut total = 0.0;
    let mut shared = 0usize;
    for (name, ta) in &a.tensors {
        let Some(tb) = b.tensors.get(name) else { continue };
        let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            ab += x as f64 * y as f64;
        }
        for &x in ta.data() {
            aa += x as f64 * x as f64;
        }
        for &y in tb.data() {
            bb += y as f64 * y as f64;
        }
        total += ab / (aa * bb).sqrt();
        shared += 1;
    }
    (total / shared as f64).clamp(-1.0, 1.0)
}

/// Every `n`-subset of `items`, each subset in input order.
fn subsets<T: Clone>(items: &[T], n: usize) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    for mask in 0u32..(1 << items.len()) {
        if mask.count_ones() as usize == n {
            out.push((0..items.len()).filter(|i| mask >> i & 1 == 1).map(|i| items[i].clone()).collect());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleTuple {
    pub ids: Vec<String>,
    pub mean_similarity: f64,
    pub rank_d: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSelection {
    pub candidates: Vec<String>,
    /// Lexicographic tuple order.
    pub tuples: Vec<OracleTuple>,
    pub chosen: Vec<String>,
}

/// Literal exhaustive expert selection with raw rank sums.
pub fn select_experts_oracle(bank: &[ModelRecord], scores: &[ModelScore], m: usize, n: usize) -> OracleSelection {
    let rank_sum: BTreeMap<&str, usize> = scores.iter().map(|s| (s.model_id.as_str(), s.rank_p + s.rank_a)).collect();
    let mut by_rank: Vec<&str> = rank_sum.keys().copied().collect();
    by_rank.sort_by_key(|id| (rank_sum[id], *id));
    let candidates: Vec<String> = by_rank[..m].iter().map(|s| s.to_string()).collect();

    let model: BTreeMap<&str, &ModelRecord> = bank.iter().map(|r| (r.model_id.as_str(), r)).collect();
    let mut sorted = candidates.clone();
    sorted.sort();
    let mut tuples: Vec<Vec<String>> = subsets(&sorted, n);
    tuples.sort();

    let means: Vec<f64> = tuples
        .iter()
        .map(|t| {
            let mut sum = 0.0;
            let mut count = 0;
            for i in 0..t.len() {
                for j in i + 1..t.len() {
                    sum += pair_cosine(model[t[i].as_str()], model[t[j].as_str()]);
                    count += 1;
                }
            }
            sum / count as f64
        })
        .collect();
    let mut order: Vec<usize> = (0..tuples.len()).collect();
    order.sort_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap().then_with(|| tuples[a].cmp(&tuples[b])));
    let mut rank_d = vec![0; tuples.len()];
    for (r, &t) in order.iter().enumerate() {
        rank_d[t] = r + 1;
    }

    let out: Vec<OracleTuple> = tuples
        .iter()
        .enumerate()
        .map(|(t, ids)| OracleTuple {
            ids: ids.clone(),
            mean_similarity: means[t],
            rank_d: rank_d[t],
            objective: ids.iter().map(|id| rank_sum[id.as_str()] as f64).sum::<f64>() + rank_d[t] as f64,
        })
        .collect();
    let chosen = out
        .iter()
        .min_by(|a, b| a.objective.partial_cmp(&b.objective).unwrap().then_with(|| a.ids.cmp(&b.ids)))
        .expect("at least one tuple")
        .ids
        .clone();
    OracleSelection { candidates, tuples: out, chosen }
}

fn model_score(id: &str, rank_p: usize, rank_a: usize) -> ModelScore {
    ModelScore {
        model_id: id.to_string(),
        ppl_r: rank_p as f64,
        acc: 1.0 / rank_a as f64,
        rank_p,
        rank_a,
        overflow: false,
    }
}

/// A random bank of up to 8 models with one or two shared tensors, plus
/// random rank permutations. Some models copy another's tensors so that
/// similarity ties occur.
pub fn random_bank(rng: &mut impl Rng) -> (Vec<ModelRecord>, Vec<ModelScore>, usize, usize) {
    let size = rng.gen_range(3..=8);
    let m = rng.gen_range(2..=size.min(5));
    let n = rng.gen_range(2..=m.min(3));
    let shapes: Vec<(String, usize, usize)> = (0..rng.gen_range(1..=2))
        .map(|i| (format!("t{i}"), rng.gen_range(1..4), rng.gen_range(1..4)))
        .collect();
    let mut ids: Vec<String> = (0..size).map(|i| format!("model-{}", (b'a' + i as u8) as char)).collect();
    ids.shuffle(rng);
    let mut bank: Vec<ModelRecord> = Vec::new();
    for id in &ids {
        let tensors = if !bank.is_empty() && rng.gen_bool(0.2) {
            bank[rng.gen_range(0..bank.len())].tensors.clone()
        } else {
            shapes
                .iter()
                .map(|(name, r, c)| {
                    let data = (0..r * c)
                        .map(|_| loop {
                            let v: f32 = rng.gen_range(-1.0..1.0);
                            if v != 0.0 {
                                break v;
                            }
                        })
                        .collect();
                    (name.clone(), Tensor::new(*r, *c, data).unwrap())
                })
                .collect()
        };
        bank.push(ModelRecord::new(id.clone(), tensors));
    }
    let mut rp: Vec<usize> = (1..=size).collect();
    let mut ra: Vec<usize> = (1..=size).collect();
    rp.shuffle(rng);
    ra.shuffle(rng);
    let scores = ids.iter().enumerate().map(|(i, id)| model_score(id, rp[i], ra[i])).collect();
    (bank, scores, m, n)
}

/// A bank whose first `n` models hold the best rank sums and mutually
/// orthogonal one-hot tensors; the rest hold strictly positive tensors.
/// Returns the bank, scores, `m` and the planted ids.
pub fn planted_bank(rng: &mut impl Rng, n: usize) -> (Vec<ModelRecord>, Vec<ModelScore>, usize, Vec<String>) {
    let size = rng.gen_range(n + 2..=8);
    let m = rng.gen_range(n + 1..=size);
    let dim = 8;
    let mut order: Vec<usize> = (0..size).collect();
    order.shuffle(rng);
    let mut bank = Vec::new();
    let mut scores = Vec::new();
    let mut planted = Vec::new();
    for (slot, &i) in order.iter().enumerate() {
        let id = format!("lora-{i:02}");
        let data: Vec<f32> = if slot < n {
            planted.push(id.clone());
            (0..dim).map(|j| if j == slot { 1.0 } else { 0.0 }).collect()
        } else {
            (0..dim).map(|_| rng.gen_range(0.1..1.0)).collect()
        };
        let mut tensors = BTreeMap::new();
        tensors.insert("w".to_string(), Tensor::new(1, dim, data).unwrap());
        bank.push(ModelRecord::new(id.clone(), tensors));
        scores.push(model_score(&id, slot + 1, slot + 1));
    }
    planted.sort();
    (bank, scores, m, planted)
}

// ---------------------------------------------------------------- data

pub fn cosine_f32(a: &[f32], b: &[f32]) -> f64 {
    let mut ab = 0.0f64;
    let mut aa = 0.0f64;
    let mut bb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// `sim[i][j]` between shot `i` and pool item `j`.
pub fn cross_similarity_oracle(shots: &EmbeddingMatrix, pool: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    (0..shots.len())
        .map(|i| (0..pool.len()).map(|j| cosine_f32(shots.row(i), pool.row(j))).collect())
        .collect()
}

/// Pool ids sorted by best shot similarity, descending, ties by id; first `c`.
pub fn top_c_oracle(shots: &EmbeddingMatrix, pool: &EmbeddingMatrix, c: usize) -> Vec<(String, f64)> {
    let sim = cross_similarity_oracle(shots, pool);
    let mut all: Vec<(String, f64)> = (0..pool.len())
        .map(|j| {
            let best = sim.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max);
            (pool.ids()[j].clone(), best)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(c);
    all
}

/// Repeatedly removes the weaker member of the most similar surviving pair
/// above `tau`. Returns survivors (score desc, id) and `(dropped, kept)`.
pub fn dedup_oracle(m: &EmbeddingMatrix, scores: &[f64], tau: f64) -> (Vec<(String, f64)>, Vec<(String, String)>) {
    let ids = m.ids();
    let mut alive = vec![true; ids.len()];
    let mut log = Vec::new();
    loop {
        let mut best: Option<(f64, &str, &str, usize, usize)> = None;
        for i in 0..ids.len() {
            for j in 0..ids.len() {
                if i == j || !alive[i] || !alive[j] || ids[i] > ids[j] {
                    continue;
                }
                let s = cosine_f32(m.row(i), m.row(j));
                if s <= tau {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bs, bi, bj, _, _)) => s > bs || (s == bs && (ids[i].as_str(), ids[j].as_str()) < (bi, bj)),
                };
                if better {
                    best = Some((s, &ids[i], &ids[j], i, j));
                }
            }
        }
        let Some((_, _, _, i, j)) = best else { break };
        // `i` has the smaller id; it survives unless its score is lower.
        let (drop, keep) = if scores[i] < scores[j] { (i, j) } else { (j, i) };
        alive[drop] = false;
        log.push((ids[drop].clone(), ids[keep].clone()));
    }
    let mut kept: Vec<(String, f64)> = (0..ids.len()).filter(|&i| alive[i]).map(|i| (ids[i].clone(), scores[i])).collect();
    kept.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    (kept, log)
}

pub fn max_intra_similarity(m: &EmbeddingMatrix) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for i in 0..m.len() {
        for j in i + 1..m.len() {
            best = best.max(cosine_f32(m.row(i), m.row(j)));
        }
    }
    best
}

/// Rows clustered around a few centres so that near-duplicates occur.
pub fn clustered_embeddings(rng: &mut impl Rng, prefix: &str, rows: usize, dim: usize, noise: f32) -> EmbeddingMatrix {
    let centres: Vec<Vec<f32>> = (0..rng.gen_range(1..=6))
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let c = &centres[rng.gen_range(0..centres.len())];
        let spread = if rng.gen_bool(0.5) { noise } else { 1.0 };
        data.extend(c.iter().map(|v| v + rng.gen_range(-spread..spread)));
    }
    let ids = (0..rows).map(|i| format!("{prefix}-{i:03}")).collect();
    EmbeddingMatrix::new(ids, dim, data).unwrap()
}

// ---------------------------------------------------------------- linear algebra

/// Random `n x n` orthogonal matrix, row-major, by Gram-Schmidt.
pub fn random_rotation(rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-3 {
            basis.push(v.into_iter().map(|x| x / len).collect());
        }
    }
    basis
}

pub fn apply(q: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    q.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Random shots and pool (`K <= 10`, `S <= 300`) with a budget and threshold.
pub struct SelectionInstance {
    pub shots: EmbeddingMatrix,
    pub pool: EmbeddingMatrix,
    pub c: usize,
    pub tau: f64,
}

pub fn selection_instance(seed: u64) -> SelectionInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(2..=16);
    let k = rng.gen_range(1..=10);
    let s = rng.gen_range(1..=300);
    SelectionInstance {
        shots: clustered_embeddings(&mut rng, "shot", k, dim, 0.3),
        pool: clustered_embeddings(&mut rng, "pool", s, dim, 0.02),
        c: rng.gen_range(1..=s),
        tau: rng.gen_range(0.8..0.99),
    }
}

/// Checks top-C and dedup of one instance against the brute-force oracles,
/// and that no surviving pair exceeds `tau`.
pub fn check_selection_instance(inst: &SelectionInstance) -> Result<(), String> {
    use expertforge_core::data_select::{cross_similarity, select_top_c, semdedup};
    let cross = cross_similarity(&inst.shots, &inst.pool).map_err(|e| e.to_string())?;
    let want = cross_similarity_oracle(&inst.shots, &inst.pool);
    for (i, row) in want.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            if (cross.get(i, j) - w).abs() >= 1e-12 {
                return Err(format!("similarity ({i},{j}) {} vs {w}", cross.get(i, j)));
            }
        }
    }
    let top = select_top_c(&cross, inst.pool.ids(), inst.c).map_err(|e| e.to_string())?;
    let want = top_c_oracle(&inst.shots, &inst.pool, inst.c);
    let got_ids: Vec<&str> = top.iter().map(|s| s.id.as_str()).collect();
    if got_ids != want.iter().map(|s| s.0.as_str()).collect::<Vec<_>>() {
        return Err("top-C ids differ".into());
    }
    let candidates = inst.pool.select(&got_ids).map_err(|e| e.to_string())?;
    let scores: Vec<f64> = want.iter().map(|s| s.1).collect();
    let out = semdedup(&candidates, &scores, inst.tau).map_err(|e| e.to_string())?;
    let (kept, log) = dedup_oracle(&candidates, &scores, inst.tau);
    let kept_ids: Vec<&str> = out.kept.iter().map(|s| s.id.as_str()).collect();
    if kept_ids != kept.iter().map(|s| s.0.as_str()).collect::<Vec<_>>() {
        return Err("dedup survivors differ".into());
    }
    let pairs: Vec<(String, String)> = out.log.iter().map(|e| (e.discarded.clone(), e.kept.clone())).collect();
    if pairs != log {
        return Err("dedup log differs".into());
    }
    let survivors = candidates.select(&kept_ids).map_err(|e| e.to_string())?;
    let max = max_intra_similarity(&survivors);
    if max > inst.tau {
        return Err(format!("surviving pair at {max} > tau {}", inst.tau));
    }
    Ok(())
}

pub fn permuted(m: &EmbeddingMatrix, order: &[usize]) -> EmbeddingMatrix {
    let ids = order.iter().map(|&i| m.ids()[i].clone()).collect();
    let data = order.iter().flat_map(|&i| m.row(i).to_vec()).collect();
    EmbeddingMatrix::new(ids, m.dim(), data).unwrap()
}

/// Runs dedup on a random clustered set and on a shuffled copy; the kept
/// lists must agree.
pub fn check_dedup_order_invariance(seed: u64) -> Result<(), String> {
    use expertforge_core::data_select::semdedup;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(2..=8);
    let n = rng.gen_range(2..=80);
    let m = clustered_embeddings(&mut rng, "c", n, dim, 0.02);
    // Coarse scores so equal-score ties are exercised.
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
    let tau = rng.gen_range(0.8..0.99);
    let base = semdedup(&m, &scores, tau).map_err(|e| e.to_string())?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let shuffled_scores: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let again = semdedup(&permuted(&m, &order), &shuffled_scores, tau).map_err(|e| e.to_string())?;
    if again.kept != base.kept {
        return Err(format!("kept sets differ for seed {seed}"));
    }
    Ok(())
}

/// Affinely independent anchors in `dim` dimensions, offset from the origin.
pub fn hull_anchors(rng: &mut impl Rng, k: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..k).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0) + 2.0).collect()).collect()
}

fn remove_components(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / len).collect()
}

/// A unit vector orthogonal to every anchor.
pub fn orthogonal_to(rng: &mut impl Rng, anchors: &[Vec<f64>]) -> Vec<f64> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for a in anchors {
        let mut v = a.clone();
        remove_components(&mut v, &basis);
        basis.push(unit(v));
    }
    let mut v: Vec<f64> = (0..anchors[0].len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    remove_components(&mut v, &basis);
    unit(v)
}

/// Vertices and pairwise midpoints must be inside, points pushed off the
/// anchors' span must be outside, before and after a random rotation, with
/// residuals agreeing to 1e-5.
pub fn check_hull_trial(seed: u64, eps: f64) -> Result<(), String> {
    use expertforge_core::data_select::ConvexHull;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, dim) = (rng.gen_range(2..=5), 8);
    let a = hull_anchors(&mut rng, k, dim);
    let mut inside: Vec<Vec<f64>> = a.clone();
    for i in 0..k {
        for j in i + 1..k {
            inside.push(a[i].iter().zip(&a[j]).map(|(x, y)| (x + y) / 2.0).collect());
        }
    }
    let centroid: Vec<f64> = (0..dim).map(|d| a.iter().map(|p| p[d]).sum::<f64>() / k as f64).collect();
    let away = orthogonal_to(&mut rng, &a);
    let outside: Vec<Vec<f64>> = [1.0, 10.0]
        .iter()
        .map(|s| centroid.iter().zip(&away).map(|(c, o)| c + s * o).collect())
        .collect();

    let q = random_rotation(&mut rng, dim);
    let hull = ConvexHull::new(a.clone()).map_err(|e| e.to_string())?;
    let rotated = ConvexHull::new(a.iter().map(|p| apply(&q, p)).collect()).map_err(|e| e.to_string())?;
    for (points, expect) in [(&inside, true), (&outside, false)] {
        for p in points {
            let (flag, fit) = hull.contains(p, eps);
            let (rflag, rfit) = rotated.contains(&apply(&q, p), eps);
            if flag != expect || rflag != expect {
                return Err(format!(
                    "expected inside={expect}, got {flag}/{rflag} (residuals {} / {})",
                    fit.residual, rfit.residual
                ));
            }
            if (fit.residual - rfit.residual).abs() >= 1e-5 {
                return Err(format!("rotation moved residual {} -> {}", fit.residual, rfit.residual));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- moe

/// Largest relative error between analytic gradients and central
/// differences with step `h`, over every parameter.
pub fn gradient_check(state: &MoeState, batch: &[Example], h: f64) -> (f64, String) {
    let analytic = loss_and_grads(batch, state).unwrap().grads;
    let mut worst = (0.0f64, String::new());
    for ((name, g), (_, p)) in analytic.named().into_iter().zip(state.params.named()) {
        for i in 0..p.data.len() {
            let at = |delta: f64| {
                let mut s = state.clone();
                let m = s.params.named_mut().into_iter().find(|(n, _)| *n == name).unwrap().1;
                m.data[i] += delta;
                loss_and_grads(batch, &s).unwrap().loss
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let a = g.data[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: analytic {a} numeric {numeric}"));
            }
        }
    }
    worst
}

/// Logits of the network with a single expert per layer and no gate.
pub fn plain_network_logits(state: &MoeState, tok: usize) -> Vec<f64> {
    let p = &state.params;
    let mut h = p.embedding.row(tok).to_vec();
    for layer in &p.experts {
        h = layer[0].mul_vec(&h);
    }
    p.output.vec_mul(&h)
}
