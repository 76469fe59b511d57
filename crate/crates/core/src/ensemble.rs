//! Probability-level ensembles: weighted averaging of member probability
//! matrices and a seeded search for member weights.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::bio_to_spans;
use crate::corpus::{Dataset, SpanAnnotation};
use crate::error::{Error, Result};
use crate::eval::{scores, MatchMode};
use crate::io::{atomic_write, write_err};
use crate::rng::SplitMix64;
use crate::tagger::{decode, ProbMatrix};
use crate::tokenizer::TokenizedTweet;

/// Member weights of the published five-model ensemble, found by random
/// search on a 0..=2 grid with step 0.1.
pub const FIVE_MODEL_WEIGHTS: [(&str, f64); 5] = [
    ("biomegatron-bert-345m-uncased", 1.0),
    ("megatron-bert-345m-uncased", 2.0),
    ("megatron-bert-345m-cased", 1.2),
    ("roberta-large", 0.4),
    ("bertweet-large", 1.4),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConfigFile", into = "ConfigFile")]
pub struct EnsembleConfig {
    member_names: Vec<String>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    members: Vec<String>,
    weights: Vec<f64>,
}

impl TryFrom<ConfigFile> for EnsembleConfig {
    type Error = Error;

    fn try_from(f: ConfigFile) -> Result<Self> {
        EnsembleConfig::new(f.members, f.weights)
    }
}

impl From<EnsembleConfig> for ConfigFile {
    fn from(c: EnsembleConfig) -> Self {
        ConfigFile {
            members: c.member_names,
            weights: c.weights,
        }
    }
}

impl EnsembleConfig {
    pub fn new(member_names: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if member_names.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} members but {} weights",
                member_names.len(),
                weights.len()
            )));
        }
        if weights.is_empty() {
            return Err(Error::InvalidArgument("ensemble has no members".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weights must be finite and non-negative, got {w}"
            )));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidArgument(
                "all ensemble weights are zero".into(),
            ));
        }
        Ok(Self {
            member_names,
            weights,
        })
    }

    /// Equal weights: plain mean of the member probabilities.
    pub fn uniform(member_names: Vec<String>) -> Result<Self> {
        let weights = vec![1.0; member_names.len()];
        Self::new(member_names, weights)
    }

    pub fn five_model() -> Self {
        Self::new(
            FIVE_MODEL_WEIGHTS
                .iter()
                .map(|(n, _)| n.to_string())
                .collect(),
            FIVE_MODEL_WEIGHTS.iter().map(|(_, w)| *w).collect(),
        )
        .expect("published weights are valid")
    }

    pub fn member_names(&self) -> &[String] {
        &self.member_names
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Schema(format!("ensemble config: {e}")))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialize");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.at(path.display().to_string(), 1))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = self.to_json();
        atomic_write(path, |w| {
            w.write_all(json.as_bytes()).map_err(write_err(path))
        })
    }
}

/// Remove members whose weight is exactly zero. The fused output is unchanged.
pub fn drop_zero_members(config: &EnsembleConfig) -> Result<EnsembleConfig> {
    let (names, weights) = config
        .member_names
        .iter()
        .zip(&config.weights)
        .filter(|(_, w)| **w != 0.0)
        .map(|(n, w)| (n.clone(), *w))
        .unzip();
    EnsembleConfig::new(names, weights)
}

/// Weighted average of one tweet's member matrices:
/// `row = sum_m (w_m / sum w) * row_m`.
///
/// Zero-weight members are skipped. Each fused entry is kept inside the
/// `[min, max]` envelope of the weighted members' entries, which exact
/// arithmetic guarantees and rounding could otherwise break by an ulp.
pub fn fuse(matrices: &[&ProbMatrix], config: &EnsembleConfig) -> Result<ProbMatrix> {
    if matrices.len() != config.len() {
        return Err(Error::InvalidArgument(format!(
            "{} member matrices for a {}-member ensemble",
            matrices.len(),
            config.len()
        )));
    }
    let first = matrices[0];
    for m in &matrices[1..] {
        if m.tweet_id != first.tweet_id {
            return Err(Error::Alignment {
                tweet_id: first.tweet_id.clone(),
                message: format!("fused with a matrix for tweet {:?}", m.tweet_id),
            });
        }
        if m.rows.len() != first.rows.len() {
            return Err(Error::Alignment {
                tweet_id: first.tweet_id.clone(),
                message: format!(
                    "members disagree on token count ({} vs {})",
                    first.rows.len(),
                    m.rows.len()
                ),
            });
        }
        if m.token_offsets != first.token_offsets {
            return Err(Error::Alignment {
                tweet_id: first.tweet_id.clone(),
                message: "members disagree on token offsets".into(),
            });
        }
    }
    let total: f64 = config.weights.iter().sum();
    let norm: Vec<f64> = config.weights.iter().map(|w| w / total).collect();
    let rows = (0..first.rows.len())
        .map(|r| {
            let mut out = [0.0; 3];
            for k in 0..3 {
                let mut acc = 0.0;
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for (m, n) in matrices.iter().zip(&norm).filter(|(_, n)| **n > 0.0) {
                    let x = m.rows[r][k];
                    acc += n * x;
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
                out[k] = acc.clamp(lo, hi);
            }
            out
        })
        .collect();
    Ok(ProbMatrix {
        tweet_id: first.tweet_id.clone(),
        token_offsets: first.token_offsets.clone(),
        rows,
    })
}

/// Check that every member covers the same tweets with the same
/// tokenization, returning the members' matrices grouped per tweet in the
/// order of the first member.
pub fn align_members(members: &[Vec<ProbMatrix>]) -> Result<Vec<Vec<&ProbMatrix>>> {
    let Some(first) = members.first() else {
        return Err(Error::InvalidArgument("no ensemble members".into()));
    };
    let indexed: Vec<HashMap<&str, &ProbMatrix>> = members
        .iter()
        .map(|set| set.iter().map(|m| (m.tweet_id.as_str(), m)).collect())
        .collect();
    for (i, set) in members.iter().enumerate().skip(1) {
        if let Some(extra) = set
            .iter()
            .find(|m| !indexed[0].contains_key(m.tweet_id.as_str()))
        {
            return Err(Error::Alignment {
                tweet_id: extra.tweet_id.clone(),
                message: format!("present in member {i} but not in member 0"),
            });
        }
    }
    first
        .iter()
        .map(|m| {
            indexed
                .iter()
                .enumerate()
                .map(|(i, idx)| {
                    let other = idx
                        .get(m.tweet_id.as_str())
                        .ok_or_else(|| Error::Alignment {
                            tweet_id: m.tweet_id.clone(),
                            message: format!("missing from member {i}"),
                        })?;
                    if other.rows.len() != m.rows.len() || other.token_offsets != m.token_offsets {
                        return Err(Error::Alignment {
                            tweet_id: m.tweet_id.clone(),
                            message: format!(
                                "member {i} has {} token rows, member 0 has {}",
                                other.rows.len(),
                                m.rows.len()
                            ),
                        });
                    }
                    Ok(*other)
                })
                .collect()
        })
        .collect()
}

/// Fuse whole member prediction sets, tweet by tweet.
pub fn fuse_sets(members: &[Vec<ProbMatrix>], config: &EnsembleConfig) -> Result<Vec<ProbMatrix>> {
    if members.len() != config.len() {
        return Err(Error::InvalidArgument(format!(
            "{} member files for a {}-member ensemble",
            members.len(),
            config.len()
        )));
    }
    align_members(members)?
        .iter()
        .map(|group| fuse(group, config))
        .collect()
}

/// Candidate weights `{low, low + step, ..., high}` sampled by the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightGrid {
    pub low: f64,
    pub high: f64,
    pub step: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl WeightGrid {
    /// The 0..=2 grid with step 0.1.
    pub fn standard(iterations: usize, seed: u64) -> Self {
        Self {
            low: 0.0,
            high: 2.0,
            step: 0.1,
            iterations,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.low.is_finite() && self.high.is_finite() && self.step.is_finite()) {
            return bad("grid bounds and step must be finite".into());
        }
        if self.low < 0.0 {
            return bad(format!("grid low must be non-negative, got {}", self.low));
        }
        if self.low > self.high {
            return bad(format!("grid low {} exceeds high {}", self.low, self.high));
        }
        if self.high <= 0.0 {
            return bad("grid must contain a positive weight".into());
        }
        if self.step <= 0.0 {
            return bad(format!("grid step must be positive, got {}", self.step));
        }
        let n = ((self.high - self.low) / self.step).round();
        if ((n * self.step) - (self.high - self.low)).abs() > 1e-9 {
            return bad(format!(
                "grid range {}..{} is not a multiple of step {}",
                self.low, self.high, self.step
            ));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        Ok(())
    }

    /// Grid values, rounded to 9 decimals so that e.g. 0.3 prints as 0.3.
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.high - self.low) / self.step).round() as usize;
        (0..=n)
            .map(|i| ((self.low + i as f64 * self.step) * 1e9).round() / 1e9)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchStrategy {
    /// `iterations` joint samples, uniform with replacement.
    Random,
    /// Every grid vector in lexicographic order (small member counts only).
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub weights: Vec<f64>,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub best: EnsembleConfig,
    pub best_f1: f64,
    pub objective: MatchMode,
    pub strategy: SearchStrategy,
    pub grid: WeightGrid,
    pub trace: Vec<TraceEntry>,
}

impl SearchReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialize");
        s.push('\n');
        s
    }
}

/// Inputs shared by every candidate evaluation.
pub struct SearchData<'a> {
    pub member_names: Vec<String>,
    pub members: &'a [Vec<ProbMatrix>],
    pub tokens: &'a [TokenizedTweet],
    pub gold: &'a Dataset,
}

const MAX_EXHAUSTIVE: usize = 5_000_000;

fn candidates(
    grid: &WeightGrid,
    members: usize,
    strategy: SearchStrategy,
) -> Result<Vec<Vec<f64>>> {
    let points = grid.points();
    match strategy {
        SearchStrategy::Random => {
            let mut rng = SplitMix64::new(grid.seed);
            let n = points.len() as u64;
            Ok((0..grid.iterations)
                .map(|_| loop {
                    let v: Vec<f64> = (0..members)
                        .map(|_| points[rng.below(n) as usize])
                        .collect();
                    if v.iter().any(|w| *w > 0.0) {
                        break v;
                    }
                })
                .collect())
        }
        SearchStrategy::Exhaustive => {
            let total = (points.len() as f64).powi(members as i32);
            if total > MAX_EXHAUSTIVE as f64 {
                return Err(Error::InvalidArgument(format!(
                    "exhaustive search over {total} grid vectors is too large"
                )));
            }
            let mut out = Vec::new();
            let mut digits = vec![0usize; members];
            loop {
                let v: Vec<f64> = digits.iter().map(|&d| points[d]).collect();
                if v.iter().any(|w| *w > 0.0) {
                    out.push(v);
                }
                let mut pos = members;
                loop {
                    if pos == 0 {
                        return Ok(out);
                    }
                    pos -= 1;
                    digits[pos] += 1;
                    if digits[pos] < points.len() {
                        break;
                    }
                    digits[pos] = 0;
                }
            }
        }
    }
}

/// Spans decoded from fused member probabilities.
pub fn ensemble_spans(
    groups: &[Vec<&ProbMatrix>],
    tokens: &HashMap<&str, &TokenizedTweet>,
    config: &EnsembleConfig,
) -> Result<Vec<SpanAnnotation>> {
    let mut spans = Vec::new();
    for group in groups {
        let fused = fuse(group, config)?;
        let tweet = tokens[fused.tweet_id.as_str()];
        spans.extend(bio_to_spans(
            &tweet.id,
            &tweet.text,
            &tweet.tokens,
            &decode(&fused),
        )?);
    }
    Ok(spans)
}

/// Search member weights on a dev set, maximizing entity F1 of the fused,
/// decoded predictions under `objective`. The candidate sequence is fixed
/// by the grid seed before any evaluation; ties keep the earliest candidate.
pub fn search_weights(
    data: &SearchData<'_>,
    grid: &WeightGrid,
    objective: MatchMode,
    strategy: SearchStrategy,
) -> Result<SearchReport> {
    grid.validate()?;
    if data.members.is_empty() {
        return Err(Error::InvalidArgument("no ensemble members".into()));
    }
    if data.member_names.len() != data.members.len() {
        return Err(Error::InvalidArgument(format!(
            "{} member names for {} member files",
            data.member_names.len(),
            data.members.len()
        )));
    }
    let groups = align_members(data.members)?;
    let tokens: HashMap<&str, &TokenizedTweet> =
        data.tokens.iter().map(|t| (t.id.as_str(), t)).collect();
    if groups.len() != tokens.len() {
        return Err(Error::Alignment {
            tweet_id: String::new(),
            message: format!(
                "member files cover {} tweets, tokens file has {}",
                groups.len(),
                tokens.len()
            ),
        });
    }
    for group in &groups {
        let id = group[0].tweet_id.as_str();
        let tok = tokens.get(id).ok_or_else(|| Error::Alignment {
            tweet_id: id.to_string(),
            message: "not in tokens file".into(),
        })?;
        group[0].check_aligned(tok)?;
        if data.gold.get(id).is_none() {
            return Err(Error::UnknownTweet(id.to_string()));
        }
    }

    let cands = candidates(grid, data.members.len(), strategy)?;
    let f1s: Vec<f64> = cands
        .par_iter()
        .map(|w| {
            let config = EnsembleConfig::new(data.member_names.clone(), w.clone())?;
            let spans = ensemble_spans(&groups, &tokens, &config)?;
            Ok(scores(data.gold, &spans, objective)?.f1)
        })
        .collect::<Result<_>>()?;

    let mut best = 0;
    for (i, f) in f1s.iter().enumerate() {
        if *f > f1s[best] {
            best = i;
        }
    }
    Ok(SearchReport {
        best: EnsembleConfig::new(data.member_names.clone(), cands[best].clone())?,
        best_f1: f1s[best],
        objective,
        strategy,
        grid: grid.clone(),
        trace: cands
            .into_iter()
            .zip(f1s)
            .map(|(weights, f1)| TraceEntry { weights, f1 })
            .collect(),
    })
}
