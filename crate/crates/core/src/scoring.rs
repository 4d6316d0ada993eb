//! Perplexity and exact-match indicators per bank model, and the rank
//! vectors derived from them.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cmp_values;
use crate::types::{ScoreTable, ShotSet};

/// How per-sample perplexity treats target length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerplexityMode {
    /// `exp(-sum logprob)`, no division by token count.
    #[default]
    Total,
    /// `exp(-mean logprob)`.
    LengthNormalized,
}

/// `exp(-sum(logprobs))`.
///
/// Overflow yields `f64::INFINITY`; callers treat that as the "worse than
/// everything" sentinel and flag the record.
pub fn perplexity(token_logprobs: &[f64]) -> Result<f64> {
    perplexity_with(token_logprobs, PerplexityMode::Total)
}

pub fn perplexity_with(token_logprobs: &[f64], mode: PerplexityMode) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::Domain("perplexity of an empty token list".into()));
    }
    if let Some((i, lp)) = token_logprobs
        .iter()
        .enumerate()
        .find(|(_, lp)| lp.is_nan() || **lp > 0.0)
    {
        return Err(Error::Domain(format!("token {i} has log-probability {lp}")));
    }
    let nll: f64 = -token_logprobs.iter().sum::<f64>();
    let exponent = match mode {
        PerplexityMode::Total => nll,
        PerplexityMode::LengthNormalized => nll / token_logprobs.len() as f64,
    };
    Ok(libm::exp(exponent))
}

/// Sum of per-shot perplexities for `model_id`, in shot order.
pub fn reasoning_perplexity(
    table: &ScoreTable,
    shots: &ShotSet,
    model_id: &str,
    mode: PerplexityMode,
) -> Result<f64> {
    shots.require_nonempty()?;
    let mut missing = Vec::new();
    let mut total = 0.0;
    for id in shots.ids() {
        match table.get(model_id, id) {
            Some(rec) if !rec.token_logprobs.is_empty() => {
                total += perplexity_with(&rec.token_logprobs, mode)?;
            }
            _ => missing.push(String::from(id)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Incomplete {
            what: format!("token log-probabilities for model {model_id}"),
            missing,
        });
    }
    Ok(total)
}

/// Maps a generated response (or a ground-truth answer) to the form that
/// exact match compares. `None` means nothing could be extracted, which
/// never matches.
pub trait PostProcess {
    fn name(&self) -> &str;
    fn apply(&self, text: &str) -> Option<String>;
}

/// Built-in post-processors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PostProcessor {
    #[default]
    Identity,
    /// First standalone letter A-E, case-insensitive, upper-cased.
    FirstChoiceLetter,
    /// Surrounding whitespace trimmed.
    VerbatimStrip,
}

impl PostProcessor {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(Self::Identity),
            "first-choice-letter" | "first-choice" => Some(Self::FirstChoiceLetter),
            "verbatim-strip" | "strip" => Some(Self::VerbatimStrip),
            _ => None,
        }
    }
}

impl PostProcess for PostProcessor {
    fn name(&self) -> &str {
        match self {
            Self::Identity => "identity",
            Self::FirstChoiceLetter => "first-choice-letter",
            Self::VerbatimStrip => "verbatim-strip",
        }
    }

    fn apply(&self, text: &str) -> Option<String> {
        match self {
            Self::Identity => Some(text.to_string()),
            Self::VerbatimStrip => Some(text.trim().to_string()),
            Self::FirstChoiceLetter => first_choice_letter(text).map(|c| c.to_string()),
        }
    }
}

fn first_choice_letter(text: &str) -> Option<char> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter_map(|tok| {
            let mut chars = tok.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => Some(c.to_ascii_uppercase()),
                _ => None,
            }
        })
        .find(|c| ('A'..='E').contains(c))
}

/// Fraction of shots answered correctly, normalized by K.
///
/// A record's `exact_match` wins when set; otherwise `post` is applied to
/// both the raw response and the ground-truth output before comparing.
pub fn accuracy(
    table: &ScoreTable,
    shots: &ShotSet,
    model_id: &str,
    post: &dyn PostProcess,
) -> Result<f64> {
    shots.require_nonempty()?;
    let mut missing = Vec::new();
    let mut hits = 0usize;
    for sample in shots.samples() {
        let rec = table.get(model_id, &sample.id);
        let hit = match rec {
            Some(r) => match (r.exact_match, r.raw_response.as_deref()) {
                (Some(m), _) => m,
                (None, Some(raw)) => match (post.apply(raw), post.apply(&sample.output)) {
                    (Some(a), Some(b)) => a == b,
                    _ => false,
                },
                (None, None) => {
                    missing.push(sample.id.clone());
                    continue;
                }
            },
            None => {
                missing.push(sample.id.clone());
                continue;
            }
        };
        hits += hit as usize;
    }
    if !missing.is_empty() {
        return Err(Error::Incomplete {
            what: format!("exact-match outcomes for model {model_id}"),
            missing,
        });
    }
    Ok(hits as f64 / shots.k() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankDirection {
    /// Smallest value gets rank 1.
    Ascending,
    /// Largest value gets rank 1.
    Descending,
}

/// 1-based ranks forming a permutation of `1..=len`. Ties go to the
/// lexicographically smaller id; `+inf` ranks last under ascending order.
pub fn assign_ranks(
    values: &BTreeMap<String, f64>,
    direction: RankDirection,
) -> Result<BTreeMap<String, usize>> {
    if values.is_empty() {
        return Err(Error::Domain("cannot rank an empty set".into()));
    }
    if let Some((id, _)) = values.iter().find(|(_, v)| v.is_nan()) {
        return Err(Error::Domain(format!("value for {id} is NaN")));
    }
    let mut order: Vec<(&String, f64)> = values.iter().map(|(k, &v)| (k, v)).collect();
    // `values` iterates in id order and the sort is stable, so ties keep
    // lexicographic order.
    order.sort_by(|a, b| match direction {
        RankDirection::Ascending => cmp_values(a.1, b.1),
        RankDirection::Descending => cmp_values(b.1, a.1),
    });
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, (id, _))| (id.clone(), i + 1))
        .collect())
}

/// Aggregated indicators for one bank model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model_id: String,
    #[serde(with = "crate::report::extended_real")]
    pub ppl_r: f64,
    pub acc: f64,
    pub rank_p: usize,
    pub rank_a: usize,
    /// Set when the reasoning perplexity overflowed to the `+inf` sentinel.
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub overflow: bool,
}

impl ModelScore {
    pub fn rank_sum(&self) -> usize {
        self.rank_p + self.rank_a
    }
}

/// Reasoning perplexity, accuracy and both rank vectors for every model in
/// `model_ids`, returned in id order.
pub fn score_models(
    table: &ScoreTable,
    shots: &ShotSet,
    model_ids: &[String],
    post: &dyn PostProcess,
    mode: PerplexityMode,
) -> Result<Vec<ModelScore>> {
    if model_ids.is_empty() {
        return Err(Error::Domain("no models to score".into()));
    }
    let mut ppl = BTreeMap::new();
    let mut acc = BTreeMap::new();
    for id in model_ids {
        let p = reasoning_perplexity(table, shots, id, mode)?;
        let a = accuracy(table, shots, id, post)?;
        if ppl.insert(id.clone(), p).is_some() {
            return Err(Error::Validation(format!("model {id} listed twice")));
        }
        acc.insert(id.clone(), a);
    }
    let rank_p = assign_ranks(&ppl, RankDirection::Ascending)?;
    let rank_a = assign_ranks(&acc, RankDirection::Descending)?;
    Ok(ppl
        .iter()
        .map(|(id, &p)| ModelScore {
            model_id: id.clone(),
            ppl_r: p,
            acc: acc[id],
            rank_p: rank_p[id],
            rank_a: rank_a[id],
            overflow: p.is_infinite(),
        })
        .collect())
}

/// Registry of named post-processors, seeded with the built-ins.
pub struct PostProcessorRegistry {
    entries: BTreeMap<String, Box<dyn PostProcess + Send + Sync>>,
}

impl Default for PostProcessorRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        for p in [
            PostProcessor::Identity,
            PostProcessor::FirstChoiceLetter,
            PostProcessor::VerbatimStrip,
        ] {
            r.register(Box::new(p));
        }
        r
    }
}

impl PostProcessorRegistry {
    pub fn register(&mut self, p: Box<dyn PostProcess + Send + Sync>) {
        self.entries.insert(p.name().to_string(), p);
    }

    pub fn get(&self, name: &str) -> Option<&(dyn PostProcess + Send + Sync)> {
        let key = PostProcessor::from_name(name)
            .map(|p| p.name().to_string())
            .unwrap_or_else(|| name.to_string());
        self.entries.get(&key).map(|b| b.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{InstructionSample, ScoreRecord};
    use alloc::vec;

    fn shots(outputs: &[&str]) -> ShotSet {
        ShotSet::new(
            outputs
                .iter()
                .enumerate()
                .map(|(i, o)| InstructionSample {
                    id: i.to_string(),
                    instruction: "Question".into(),
                    input: String::new(),
                    output: (*o).into(),
                    cot_output: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn rec(model: &str, sample: usize, lps: &[f64], em: Option<bool>) -> ScoreRecord {
        ScoreRecord {
            model_id: model.into(),
            sample_id: sample.to_string(),
            token_logprobs: lps.to_vec(),
            exact_match: em,
            raw_response: None,
        }
    }

    #[test]
    fn perplexity_examples() {
        assert!((perplexity(&[-1.0]).unwrap() - core::f64::consts::E).abs() < 1e-12);
        assert_eq!(perplexity(&[0.0, 0.0]).unwrap(), 1.0);
        assert!((perplexity(&[-1.0, -2.0]).unwrap() - 20.085536923187668).abs() < 1e-9);
        assert!(perplexity(&[]).is_err());
        assert!(perplexity(&[0.5]).is_err());
        assert_eq!(perplexity(&[-1000.0]).unwrap(), f64::INFINITY);
        let norm = perplexity_with(&[-1.0, -3.0], PerplexityMode::LengthNormalized).unwrap();
        assert!((norm - libm::exp(2.0)).abs() < 1e-12);
    }

    #[test]
    fn reasoning_perplexity_sums_per_sample() {
        let s = shots(&["A", "B"]);
        let t = ScoreTable::from_records(vec![
            rec("m", 0, &[-1.0], None),
            rec("m", 1, &[-1.0], None),
        ])
        .unwrap();
        let v = reasoning_perplexity(&t, &s, "m", PerplexityMode::Total).unwrap();
        assert!((v - 2.0 * core::f64::consts::E).abs() < 1e-12);

        let one = shots(&["A"]);
        let t1 = ScoreTable::from_records(vec![rec("m", 0, &[0.0, 0.0, 0.0], None)]).unwrap();
        assert_eq!(reasoning_perplexity(&t1, &one, "m", PerplexityMode::Total).unwrap(), 1.0);

        let partial = ScoreTable::from_records(vec![rec("m", 0, &[-1.0], None)]).unwrap();
        match reasoning_perplexity(&partial, &s, "m", PerplexityMode::Total) {
            Err(Error::Incomplete { missing, .. }) => assert_eq!(missing, vec![String::from("1")]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn accuracy_examples() {
        let s = shots(&["A", "B", "C", "D"]);
        let all = ScoreTable::from_records((0..4).map(|i| rec("m", i, &[-0.1], Some(true)))).unwrap();
        assert_eq!(accuracy(&all, &s, "m", &PostProcessor::Identity).unwrap(), 1.0);
        let one = ScoreTable::from_records((0..4).map(|i| rec("m", i, &[-0.1], Some(i == 2)))).unwrap();
        assert_eq!(accuracy(&one, &s, "m", &PostProcessor::Identity).unwrap(), 0.25);

        let gt = shots(&["A. dry palms"]);
        let mut r = rec("m", 0, &[-0.1], None);
        r.raw_response = Some("Answer: A. dry palms".into());
        let t = ScoreTable::from_records(vec![r.clone()]).unwrap();
        assert_eq!(accuracy(&t, &gt, "m", &PostProcessor::FirstChoiceLetter).unwrap(), 1.0);
        assert_eq!(accuracy(&t, &gt, "m", &PostProcessor::Identity).unwrap(), 0.0);

        r.raw_response = None;
        let t = ScoreTable::from_records(vec![r]).unwrap();
        assert!(matches!(
            accuracy(&t, &gt, "m", &PostProcessor::Identity),
            Err(Error::Incomplete { .. })
        ));
    }

    #[test]
    fn first_choice_letter_extraction() {
        let p = PostProcessor::FirstChoiceLetter;
        assert_eq!(p.apply("Answer: A. dry palms").as_deref(), Some("A"));
        assert_eq!(p.apply("the answer is (c)").as_deref(), Some("C"));
        assert_eq!(p.apply("Fine, no letter").as_deref(), None);
        assert_eq!(PostProcessor::VerbatimStrip.apply("  x \n").as_deref(), Some("x"));
    }

    #[test]
    fn rank_examples() {
        let v: BTreeMap<String, f64> = [("a", 3.0), ("b", 1.0), ("c", 2.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let r = assign_ranks(&v, RankDirection::Ascending).unwrap();
        assert_eq!((r["b"], r["c"], r["a"]), (1, 2, 3));

        let tie: BTreeMap<String, f64> =
            [("a", 1.0), ("b", 1.0)].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let r = assign_ranks(&tie, RankDirection::Ascending).unwrap();
        assert_eq!((r["a"], r["b"]), (1, 2));

        let acc: BTreeMap<String, f64> =
            [("a", 0.9), ("b", 0.5)].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let r = assign_ranks(&acc, RankDirection::Descending).unwrap();
        assert_eq!((r["a"], r["b"]), (1, 2));

        let inf: BTreeMap<String, f64> = [("a", f64::INFINITY), ("b", 1e300)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        assert_eq!(assign_ranks(&inf, RankDirection::Ascending).unwrap()["a"], 2);
        assert!(assign_ranks(&BTreeMap::new(), RankDirection::Ascending).is_err());
    }

    #[test]
    fn registry_resolves_builtins_and_custom() {
        struct Lower;
        impl PostProcess for Lower {
            fn name(&self) -> &str {
                "lower"
            }
            fn apply(&self, t: &str) -> Option<String> {
                Some(t.to_lowercase())
            }
        }
        let mut reg = PostProcessorRegistry::default();
        reg.register(Box::new(Lower));
        assert!(reg.get("first-choice").is_some());
        assert_eq!(reg.get("lower").unwrap().apply("AB").as_deref(), Some("ab"));
        assert!(reg.get("nope").is_none());
    }
}
