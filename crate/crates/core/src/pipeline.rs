//! End-to-end runs driven by a single JSON config.
//!
//! Three modes:
//!
//! * `single`: train one baseline tagger on `train`, select its epoch on
//!   `dev`, predict `test`.
//! * `out-of-fold-ensemble`: pool `train` and `dev`, split into `k` folds,
//!   train one tagger per held-out fold, average the `k` taggers'
//!   probabilities on `test`.
//! * `weighted-ensemble`: fuse existing member probability files for `test`
//!   with fixed weights, or with weights searched on member dev files.
//!
//! Every random choice draws from a sub-seed `derive_seed(seed, tag)` with
//! the tags `"folds"`, `"train"`, `"train-fold-{i}"` and `"weight-search"`.
//! Artifacts land in `run_dir` under fixed names: `tokens.jsonl`,
//! `probs-{member}.jsonl`, `probs-ensemble.jsonl`, `spans.tsv`,
//! `report.json`, plus `model.json` / `model-fold{i}.json`, `folds.tsv`,
//! `probs-oof.jsonl`, `ensemble.json` and `search.json` where they apply.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{bio_to_spans, label_tweet, LabeledTweet};
use crate::corpus::{
    fold_views, load_dataset, split_folds, write_annotations, Dataset, SpanAnnotation,
};
use crate::ensemble::{
    align_members, fuse, search_weights, EnsembleConfig, SearchData, SearchReport, SearchStrategy,
    WeightGrid,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, MatchMode};
use crate::io::{atomic_write, write_err};
use crate::rng::derive_seed;
use crate::tagger::{
    decode, load_prob_file, predict_probs, train_baseline, write_prob_file, BaselineModel,
    ProbMatrix, TrainConfig,
};
use crate::tokenizer::{
    default_rules, tokenize_all, write_tokenized, TokenizedTweet, TokenizerRules,
};

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Single,
    WeightedEnsemble,
    OutOfFoldEnsemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub tweets: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub name: String,
    /// Probabilities over the test tweets.
    pub probs: PathBuf,
    /// Probabilities over the dev tweets, needed for weight search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_probs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub low: f64,
    #[serde(default = "default_high")]
    pub high: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    pub iterations: usize,
    #[serde(default = "default_objective")]
    pub objective: MatchMode,
}

fn default_high() -> f64 {
    2.0
}

fn default_step() -> f64 {
    0.1
}

fn default_objective() -> MatchMode {
    MatchMode::Strict
}

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingOptions {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub gazetteer: Vec<String>,
}

fn default_epochs() -> usize {
    TrainConfig::default().epochs
}

fn default_learning_rate() -> f64 {
    TrainConfig::default().learning_rate
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            learning_rate: default_learning_rate(),
            gazetteer: Vec::new(),
        }
    }
}

impl TrainingOptions {
    fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed,
            gazetteer: self.gazetteer.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub run_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<DataPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<DataPaths>,
    pub test: DataPaths,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub training: TrainingOptions,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<MemberSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::InvalidArgument(format!("run config: {e}")))
    }

    /// Parse a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        resolve(base, &mut cfg.run_dir);
        if let Some(r) = &mut cfg.rules {
            resolve(base, r);
        }
        for d in [&mut cfg.train, &mut cfg.dev].into_iter().flatten() {
            resolve(base, &mut d.tweets);
            if let Some(a) = &mut d.annotations {
                resolve(base, a);
            }
        }
        resolve(base, &mut cfg.test.tweets);
        if let Some(a) = &mut cfg.test.annotations {
            resolve(base, a);
        }
        for m in &mut cfg.members {
            resolve(base, &mut m.probs);
            if let Some(d) = &mut m.dev_probs {
                resolve(base, d);
            }
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    /// Check that the fields the mode needs are present and consistent.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let annotated = |d: &Option<DataPaths>| d.as_ref().is_some_and(|d| d.annotations.is_some());
        match self.mode {
            RunMode::Single => {
                if !annotated(&self.train) || !annotated(&self.dev) {
                    return bad("single mode needs annotated train and dev sets".into());
                }
            }
            RunMode::OutOfFoldEnsemble => {
                if !annotated(&self.train) {
                    return bad("out-of-fold mode needs an annotated train set".into());
                }
                if self.dev.is_some() && !annotated(&self.dev) {
                    return bad("the dev set is pooled into the folds and needs annotations".into());
                }
                if self.k < 2 {
                    return bad(format!("k must be at least 2, got {}", self.k));
                }
            }
            RunMode::WeightedEnsemble => {
                if self.members.is_empty() {
                    return bad("weighted-ensemble mode needs at least one member".into());
                }
                let mut seen = std::collections::HashSet::new();
                for m in &self.members {
                    let ok = !m.name.is_empty()
                        && m.name
                            .chars()
                            .all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
                    if !ok || m.name == "ensemble" || m.name == "oof" {
                        return bad(format!("invalid member name {:?}", m.name));
                    }
                    if !seen.insert(&m.name) {
                        return bad(format!("duplicate member name {:?}", m.name));
                    }
                }
                match (&self.weights, &self.grid) {
                    (Some(w), None) => {
                        if w.len() != self.members.len() {
                            return bad(format!(
                                "{} weights for {} members",
                                w.len(),
                                self.members.len()
                            ));
                        }
                    }
                    (None, Some(_)) => {
                        if !annotated(&self.dev) {
                            return bad("weight search needs an annotated dev set".into());
                        }
                        if let Some(m) = self.members.iter().find(|m| m.dev_probs.is_none()) {
                            return bad(format!(
                                "member {:?} has no dev_probs for weight search",
                                m.name
                            ));
                        }
                    }
                    _ => return bad("give exactly one of weights or grid".into()),
                }
            }
        }
        Ok(())
    }
}

/// Everything a run produced, also written to the run directory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub fused: Vec<ProbMatrix>,
    pub spans: Vec<SpanAnnotation>,
    /// Present when the test set is annotated.
    pub report: Option<EvalReport>,
    pub ensemble: Option<EnsembleConfig>,
    pub search: Option<SearchReport>,
    /// Span-to-token alignment warnings from labeling the training data.
    pub warnings: Vec<String>,
}

fn load_rules(config: &RunConfig) -> Result<TokenizerRules> {
    match &config.rules {
        Some(p) => TokenizerRules::load(p),
        None => Ok(default_rules()),
    }
}

fn load(paths: &DataPaths) -> Result<Dataset> {
    load_dataset(&paths.tweets, paths.annotations.as_deref())
}

/// Tokenize and label every tweet of an annotated dataset.
pub fn label_dataset(
    dataset: &Dataset,
    rules: &TokenizerRules,
) -> Result<(Vec<LabeledTweet>, Vec<String>)> {
    let mut labeled = Vec::with_capacity(dataset.len());
    let mut warnings = Vec::new();
    for (tweet, spans) in dataset.iter() {
        let (l, w) = label_tweet(tweet, spans, rules)?;
        warnings.extend(w.into_iter().map(|w| format!("{}: {w}", tweet.id)));
        labeled.push(l);
    }
    Ok((labeled, warnings))
}

/// Decode fused matrices back to character spans.
pub fn decode_spans(
    tokens: &[TokenizedTweet],
    fused: &[ProbMatrix],
) -> Result<Vec<SpanAnnotation>> {
    let mut spans = Vec::new();
    for (t, m) in tokens.iter().zip(fused) {
        m.check_aligned(t)?;
        spans.extend(bio_to_spans(&t.id, &t.text, &t.tokens, &decode(m))?);
    }
    Ok(spans)
}

fn write_json(path: &Path, json: &str) -> Result<()> {
    atomic_write(path, |w| {
        w.write_all(json.as_bytes()).map_err(write_err(path))
    })
}

fn create_run_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write spans (and the report, when gold exists) for the target set.
fn finish(
    dir: &Path,
    test: &Dataset,
    tokens: &[TokenizedTweet],
    fused: Vec<ProbMatrix>,
    has_gold: bool,
) -> Result<(Vec<ProbMatrix>, Vec<SpanAnnotation>, Option<EvalReport>)> {
    let spans = decode_spans(tokens, &fused)?;
    write_annotations(&dir.join("spans.tsv"), &spans)?;
    let report = if has_gold {
        let r = evaluate(test, &spans)?;
        r.write_json(&dir.join("report.json"))?;
        Some(r)
    } else {
        None
    };
    Ok((fused, spans, report))
}

/// Run whichever mode the config names.
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    match config.mode {
        RunMode::Single => run_single(config),
        RunMode::OutOfFoldEnsemble => run_out_of_fold(config),
        RunMode::WeightedEnsemble => run_weighted_ensemble(config),
    }
}

pub fn run_single(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let rules = load_rules(config)?;
    let train = load(config.train.as_ref().expect("validated"))?;
    let dev = load(config.dev.as_ref().expect("validated"))?;
    let test = load(&config.test)?;
    let dir = &config.run_dir;
    create_run_dir(dir)?;

    let (train_l, mut warnings) = label_dataset(&train, &rules)?;
    let (dev_l, w) = label_dataset(&dev, &rules)?;
    warnings.extend(w);
    let cfg = config
        .training
        .with_seed(derive_seed(config.seed(), "train"));
    let model = train_baseline(&train_l, &dev_l, &cfg)?;
    model.save(&dir.join("model.json"))?;

    let tokens = tokenize_all(test.tweets(), &rules);
    write_tokenized(&dir.join("tokens.jsonl"), &tokens)?;
    let probs: Vec<ProbMatrix> = tokens.iter().map(|t| predict_probs(&model, t)).collect();
    write_prob_file(&dir.join("probs-baseline.jsonl"), &probs)?;
    let (fused, spans, report) = finish(
        dir,
        &test,
        &tokens,
        probs,
        config.test.annotations.is_some(),
    )?;
    Ok(RunOutput {
        fused,
        spans,
        report,
        ensemble: None,
        search: None,
        warnings,
    })
}

/// Train `k` fold models on train ∪ dev and average their probabilities
/// over the test set.
pub fn run_out_of_fold(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let rules = load_rules(config)?;
    let mut pool = load(config.train.as_ref().expect("validated"))?;
    if let Some(dev) = &config.dev {
        pool = pool.concat(&load(dev)?)?;
    }
    let test = load(&config.test)?;
    let dir = &config.run_dir;
    create_run_dir(dir)?;

    let seed = config.seed();
    let folds = split_folds(&pool, config.k, derive_seed(seed, "folds"))?;
    folds.write(&dir.join("folds.tsv"))?;
    let (_, warnings) = label_dataset(&pool, &rules)?;

    let tokens = tokenize_all(test.tweets(), &rules);
    write_tokenized(&dir.join("tokens.jsonl"), &tokens)?;

    type FoldResult = (BaselineModel, Vec<ProbMatrix>, Vec<ProbMatrix>);
    let per_fold: Vec<FoldResult> = (0..config.k)
        .into_par_iter()
        .map(|i| -> Result<FoldResult> {
            let (train, held_out) = fold_views(&pool, &folds, i)?;
            let (train_l, _) = label_dataset(&train, &rules)?;
            let (held_l, _) = label_dataset(&held_out, &rules)?;
            let cfg = config
                .training
                .with_seed(derive_seed(seed, &format!("train-fold-{i}")));
            let model = train_baseline(&train_l, &held_l, &cfg)?;
            let test_probs = tokens.iter().map(|t| predict_probs(&model, t)).collect();
            let oof = held_l
                .iter()
                .map(|l| {
                    predict_probs(
                        &model,
                        &TokenizedTweet {
                            id: l.tweet_id.clone(),
                            text: l.text.clone(),
                            tokens: l.tokens.clone(),
                        },
                    )
                })
                .collect();
            Ok((model, test_probs, oof))
        })
        .collect::<Result<_>>()?;

    let mut oof_by_id: HashMap<String, ProbMatrix> = HashMap::new();
    for (i, (model, test_probs, oof)) in per_fold.iter().enumerate() {
        model.save(&dir.join(format!("model-fold{i}.json")))?;
        write_prob_file(&dir.join(format!("probs-fold{i}.jsonl")), test_probs)?;
        oof_by_id.extend(oof.iter().map(|m| (m.tweet_id.clone(), m.clone())));
    }
    let oof: Vec<ProbMatrix> = pool
        .tweets()
        .iter()
        .map(|t| oof_by_id.remove(&t.id).expect("every tweet held out once"))
        .collect();
    write_prob_file(&dir.join("probs-oof.jsonl"), &oof)?;

    let names = (0..config.k).map(|i| format!("fold{i}")).collect();
    let ensemble = EnsembleConfig::uniform(names)?;
    let fused = (0..tokens.len())
        .map(|t| {
            let group: Vec<&ProbMatrix> = per_fold.iter().map(|(_, p, _)| &p[t]).collect();
            fuse(&group, &ensemble)
        })
        .collect::<Result<Vec<_>>>()?;
    write_prob_file(&dir.join("probs-ensemble.jsonl"), &fused)?;
    let (fused, spans, report) = finish(
        dir,
        &test,
        &tokens,
        fused,
        config.test.annotations.is_some(),
    )?;
    Ok(RunOutput {
        fused,
        spans,
        report,
        ensemble: Some(ensemble),
        search: None,
        warnings,
    })
}

/// Order member matrices by the tweets of `tokens`, checking that every
/// member covers exactly those tweets with the same tokenization.
pub fn align_to_tokens<'a>(
    members: &'a [Vec<ProbMatrix>],
    tokens: &[TokenizedTweet],
) -> Result<Vec<Vec<&'a ProbMatrix>>> {
    let groups = align_members(members)?;
    let mut by_id: HashMap<&str, Vec<&ProbMatrix>> = groups
        .into_iter()
        .map(|g| (g[0].tweet_id.as_str(), g))
        .collect();
    let mut out = Vec::with_capacity(tokens.len());
    for t in tokens {
        let group = by_id
            .remove(t.id.as_str())
            .ok_or_else(|| Error::Alignment {
                tweet_id: t.id.clone(),
                message: "no probability rows in the member files".into(),
            })?;
        for m in &group {
            m.check_aligned(t)?;
        }
        out.push(group);
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(Error::UnknownTweet(extra.to_string()));
    }
    Ok(out)
}

/// Fuse member probability files for the test set, with fixed weights or
/// weights searched on the members' dev files.
pub fn run_weighted_ensemble(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let rules = load_rules(config)?;
    let test = load(&config.test)?;
    let dir = &config.run_dir;
    create_run_dir(dir)?;
    let names: Vec<String> = config.members.iter().map(|m| m.name.clone()).collect();

    let (ensemble, search) = match (&config.weights, &config.grid) {
        (Some(w), _) => (EnsembleConfig::new(names.clone(), w.clone())?, None),
        (None, Some(g)) => {
            let dev = load(config.dev.as_ref().expect("validated"))?;
            let dev_tokens = tokenize_all(dev.tweets(), &rules);
            let dev_members = config
                .members
                .iter()
                .map(|m| load_prob_file(m.dev_probs.as_ref().expect("validated")))
                .collect::<Result<Vec<_>>>()?;
            let grid = WeightGrid {
                low: g.low,
                high: g.high,
                step: g.step,
                iterations: g.iterations,
                seed: derive_seed(config.seed(), "weight-search"),
            };
            let data = SearchData {
                member_names: names.clone(),
                members: &dev_members,
                tokens: &dev_tokens,
                gold: &dev,
            };
            let report = search_weights(&data, &grid, g.objective, SearchStrategy::Random)?;
            write_json(&dir.join("search.json"), &report.to_json())?;
            (report.best.clone(), Some(report))
        }
        (None, None) => unreachable!("validated"),
    };
    ensemble.save(&dir.join("ensemble.json"))?;

    let tokens = tokenize_all(test.tweets(), &rules);
    write_tokenized(&dir.join("tokens.jsonl"), &tokens)?;
    let members = config
        .members
        .iter()
        .map(|m| load_prob_file(&m.probs))
        .collect::<Result<Vec<_>>>()?;
    let fused = align_to_tokens(&members, &tokens)?
        .iter()
        .map(|g| fuse(g, &ensemble))
        .collect::<Result<Vec<_>>>()?;
    write_prob_file(&dir.join("probs-ensemble.jsonl"), &fused)?;
    let (fused, spans, report) = finish(
        dir,
        &test,
        &tokens,
        fused,
        config.test.annotations.is_some(),
    )?;
    Ok(RunOutput {
        fused,
        spans,
        report,
        ensemble: Some(ensemble),
        search,
        warnings: Vec::new(),
    })
}
