//! Averaged-perceptron token tagger.
//!
//! Each token is scored independently from sparse string features (see
//! [`FEATURE_TEMPLATES`]); the three class scores go through a softmax to
//! become a probability row. Training keeps the averaged weights of the
//! epoch with the best token-level micro-F1 on the dev set.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::{extract, Gazetteer, FEATURE_TEMPLATES};
use super::{argmax, decode, ProbMatrix};
use crate::alignment::{BioLabel, LabeledTweet};
use crate::error::{Error, Result};
use crate::io::{atomic_write, write_err};
use crate::rng::SplitMix64;
use crate::tokenizer::{Token, TokenizedTweet};

const MODEL_FORMAT: &str = "medtag-baseline-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Step size of each perceptron update. It scales every weight alike, so
    /// it changes the sharpness of the probabilities but not the argmax.
    pub learning_rate: f64,
    pub seed: u64,
    /// Extra gazetteer names on top of the entities seen in training.
    #[serde(default)]
    pub gazetteer: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1.0,
            seed: 0,
            gazetteer: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub train_tweets: usize,
    pub dev_tweets: usize,
    pub best_epoch: usize,
    pub dev_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    gazetteer: Gazetteer,
    weights: BTreeMap<String, [f64; 3]>,
    summary: Option<TrainingSummary>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    classes: Vec<String>,
    templates: Vec<String>,
    gazetteer: Gazetteer,
    weights: BTreeMap<String, [f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingSummary>,
}

impl BaselineModel {
    pub fn from_parts(gazetteer: Gazetteer, weights: BTreeMap<String, [f64; 3]>) -> Result<Self> {
        if let Some((f, _)) = weights
            .iter()
            .find(|(_, w)| w.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Schema(format!(
                "non-finite weight for feature {f:?}"
            )));
        }
        Ok(Self {
            gazetteer,
            weights,
            summary: None,
        })
    }

    /// A model with no weights: every row is uniform.
    pub fn zero(gazetteer: Gazetteer) -> Self {
        Self {
            gazetteer,
            weights: BTreeMap::new(),
            summary: None,
        }
    }

    pub fn gazetteer(&self) -> &Gazetteer {
        &self.gazetteer
    }

    pub fn weights(&self) -> &BTreeMap<String, [f64; 3]> {
        &self.weights
    }

    pub fn summary(&self) -> Option<&TrainingSummary> {
        self.summary.as_ref()
    }

    /// Raw class scores for every token.
    pub fn scores(&self, tokens: &[Token]) -> Vec<[f64; 3]> {
        extract(tokens, &self.gazetteer)
            .iter()
            .map(|feats| {
                let mut s = [0.0; 3];
                for f in feats {
                    if let Some(w) = self.weights.get(f) {
                        for k in 0..3 {
                            s[k] += w[k];
                        }
                    }
                }
                s
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            classes: BioLabel::ALL
                .iter()
                .map(|l| l.as_str().to_string())
                .collect(),
            templates: FEATURE_TEMPLATES.iter().map(|t| t.to_string()).collect(),
            gazetteer: self.gazetteer.clone(),
            weights: self.weights.clone(),
            training: self.summary.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("model serialize");
        s.push('\n');
        s
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(json).map_err(|e| Error::Schema(format!("model file: {e}")))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Schema(format!(
                "model format {:?}, expected {MODEL_FORMAT:?}",
                file.format
            )));
        }
        if file.templates != FEATURE_TEMPLATES {
            return Err(Error::Schema(format!(
                "model was trained with templates {:?}",
                file.templates
            )));
        }
        let classes: Vec<&str> = BioLabel::ALL.iter().map(|l| l.as_str()).collect();
        if file.classes != classes {
            return Err(Error::Schema(format!(
                "model class order {:?}",
                file.classes
            )));
        }
        let mut model = Self::from_parts(file.gazetteer, file.weights)?;
        model.summary = file.training;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = self.to_json();
        atomic_write(path, |w| {
            w.write_all(json.as_bytes()).map_err(write_err(path))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.at(path.display().to_string(), 1))
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: [f64; 3]) -> [f64; 3] {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = scores.map(|s| (s - max).exp());
    let z: f64 = e.iter().sum();
    e.map(|x| x / z)
}

pub fn predict_probs(model: &BaselineModel, tweet: &TokenizedTweet) -> ProbMatrix {
    let rows = model
        .scores(&tweet.tokens)
        .into_iter()
        .map(softmax)
        .collect();
    ProbMatrix {
        tweet_id: tweet.id.clone(),
        token_offsets: tweet.offsets(),
        rows,
    }
}

/// Token-level micro-F1 over the entity classes: a token counts as a true
/// positive when gold and predicted labels agree and are not `O`.
pub fn token_f1<I>(pairs: I) -> f64
where
    I: IntoIterator<Item = (BioLabel, BioLabel)>,
{
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (gold, pred) in pairs {
        if gold == pred {
            if gold.is_entity() {
                tp += 1;
            }
            continue;
        }
        if pred.is_entity() {
            fp += 1;
        }
        if gold.is_entity() {
            fn_ += 1;
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

struct FeatureIndex {
    ids: HashMap<String, usize>,
    names: Vec<String>,
}

impl FeatureIndex {
    fn intern(&mut self, f: String) -> usize {
        if let Some(&i) = self.ids.get(&f) {
            return i;
        }
        let i = self.names.len();
        self.ids.insert(f.clone(), i);
        self.names.push(f);
        i
    }
}

/// Train the baseline on `train`, selecting the epoch with the best
/// token-level F1 on `dev` (earliest epoch on ties).
pub fn train_baseline(
    train: &[LabeledTweet],
    dev: &[LabeledTweet],
    config: &TrainConfig,
) -> Result<BaselineModel> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::InvalidArgument(
            "dev set is empty; pass a held-out dev split for epoch selection".into(),
        ));
    }
    if config.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be at least 1".into()));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive and finite, got {}",
            config.learning_rate
        )));
    }

    let mut gazetteer = Gazetteer::new();
    for t in train {
        for (s, e) in entity_runs(&t.labels) {
            gazetteer.insert_tokens(&t.tokens[s..e]);
        }
    }
    for name in &config.gazetteer {
        gazetteer.insert(name);
    }

    let mut index = FeatureIndex {
        ids: HashMap::new(),
        names: Vec::new(),
    };
    let instances: Vec<Vec<(Vec<usize>, usize)>> = train
        .iter()
        .map(|t| {
            extract(&t.tokens, &gazetteer)
                .into_iter()
                .zip(&t.labels)
                .map(|(feats, l)| {
                    let ids = feats.into_iter().map(|f| index.intern(f)).collect();
                    (ids, l.index())
                })
                .collect()
        })
        .collect();
    let dev_features: Vec<Vec<Vec<Option<usize>>>> = dev
        .iter()
        .map(|t| {
            extract(&t.tokens, &gazetteer)
                .into_iter()
                .map(|feats| feats.iter().map(|f| index.ids.get(f).copied()).collect())
                .collect()
        })
        .collect();

    let n = index.names.len();
    let lr = config.learning_rate;
    let mut weights = vec![[0.0f64; 3]; n];
    // Running sum of step-stamped updates; averaged = weights - acc / steps.
    let mut acc = vec![[0.0f64; 3]; n];
    let mut steps = 1.0f64;
    let mut rng = SplitMix64::new(config.seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut best: Option<(usize, f64, Vec<[f64; 3]>)> = None;

    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        for &ti in &order {
            for (feats, gold) in &instances[ti] {
                let mut s = [0.0; 3];
                for &f in feats {
                    for k in 0..3 {
                        s[k] += weights[f][k];
                    }
                }
                let guess = argmax(&s);
                if guess != *gold {
                    for &f in feats {
                        weights[f][*gold] += lr;
                        weights[f][guess] -= lr;
                        acc[f][*gold] += steps * lr;
                        acc[f][guess] -= steps * lr;
                    }
                }
                steps += 1.0;
            }
        }

        let averaged: Vec<[f64; 3]> = weights
            .iter()
            .zip(&acc)
            .map(|(w, a)| [0, 1, 2].map(|k| w[k] - a[k] / steps))
            .collect();
        if averaged.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite weights after epoch {epoch}"
            )));
        }

        let pairs = dev.iter().zip(&dev_features).flat_map(|(t, feats)| {
            let rows: Vec<[f64; 3]> = feats
                .iter()
                .map(|fs| {
                    let mut s = [0.0; 3];
                    for f in fs.iter().flatten() {
                        for k in 0..3 {
                            s[k] += averaged[*f][k];
                        }
                    }
                    softmax(s)
                })
                .collect();
            let m = ProbMatrix {
                tweet_id: t.tweet_id.clone(),
                token_offsets: Vec::new(),
                rows,
            };
            t.labels.iter().copied().zip(decode(&m)).collect::<Vec<_>>()
        });
        let f1 = token_f1(pairs);
        if best.as_ref().is_none_or(|(_, b, _)| f1 > *b) {
            best = Some((epoch, f1, averaged));
        }
    }

    let (best_epoch, dev_f1, averaged) = best.expect("at least one epoch");
    let weights = index
        .names
        .into_iter()
        .zip(averaged)
        .filter(|(_, w)| w.iter().any(|x| *x != 0.0))
        .collect();
    Ok(BaselineModel {
        gazetteer,
        weights,
        summary: Some(TrainingSummary {
            epochs: config.epochs,
            learning_rate: config.learning_rate,
            seed: config.seed,
            train_tweets: train.len(),
            dev_tweets: dev.len(),
            best_epoch,
            dev_f1,
        }),
    })
}

/// Token ranges `[start, end)` of `B-DRUG I-DRUG*` runs.
fn entity_runs(labels: &[BioLabel]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut open: Option<usize> = None;
    for (i, l) in labels.iter().enumerate() {
        match l {
            BioLabel::BDrug => {
                if let Some(s) = open.replace(i) {
                    runs.push((s, i));
                }
            }
            BioLabel::IDrug if open.is_some() => {}
            _ => {
                if let Some(s) = open.take() {
                    runs.push((s, i));
                }
            }
        }
    }
    if let Some(s) = open {
        runs.push((s, labels.len()));
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::label_tweet;
    use crate::corpus::{SpanAnnotation, Tweet, DRUG};
    use crate::tokenizer::{default_rules, TokenizedTweet};

    fn labeled(id: &str, text: &str, drugs: &[&str]) -> LabeledTweet {
        let tweet = Tweet::new(id, text);
        let spans: Vec<SpanAnnotation> = drugs
            .iter()
            .map(|d| {
                let byte = text.find(d).unwrap();
                let start = text[..byte].chars().count();
                let end = start + d.chars().count();
                SpanAnnotation::new(id, start, end, *d, DRUG)
            })
            .collect();
        label_tweet(&tweet, &spans, &default_rules()).unwrap().0
    }

    fn gazetteer_corpus() -> Vec<LabeledTweet> {
        vec![
            labeled("a", "took zofran today", &["zofran"]),
            labeled("b", "my tylenol ran out", &["tylenol"]),
            labeled("c", "need more folic acid now", &["folic acid"]),
            labeled("d", "nothing to report today", &[]),
            labeled("e", "zofran and tylenol again", &["zofran", "tylenol"]),
            labeled("f", "the baby kicked today", &[]),
        ]
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = BaselineModel::zero(Gazetteer::new());
        let t = TokenizedTweet::new(&Tweet::new("x", "never seen"), &default_rules());
        let p = predict_probs(&m, &t);
        assert_eq!(p.rows.len(), 2);
        for r in &p.rows {
            assert_eq!(*r, [1.0 / 3.0; 3]);
        }
        let empty = TokenizedTweet {
            id: "e".into(),
            text: " ".into(),
            tokens: vec![],
        };
        assert!(predict_probs(&m, &empty).rows.is_empty());
    }

    #[test]
    fn perfect_fit_on_gazetteer_corpus() {
        let corpus = gazetteer_corpus();
        let model = train_baseline(&corpus, &corpus, &TrainConfig::default()).unwrap();
        let summary = model.summary().unwrap();
        assert_eq!(summary.dev_f1, 1.0);
        for t in &corpus {
            let tok = TokenizedTweet {
                id: t.tweet_id.clone(),
                text: t.text.clone(),
                tokens: t.tokens.clone(),
            };
            assert_eq!(decode(&predict_probs(&model, &tok)), t.labels);
        }
        let tok = TokenizedTweet::new(&Tweet::new("z", "zofran"), &default_rules());
        assert_eq!(decode(&predict_probs(&model, &tok)), vec![BioLabel::BDrug]);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = gazetteer_corpus();
        let cfg = TrainConfig {
            seed: 7,
            ..TrainConfig::default()
        };
        let a = train_baseline(&corpus, &corpus[..2], &cfg).unwrap();
        let b = train_baseline(&corpus, &corpus[..2], &cfg).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn argument_errors() {
        let corpus = gazetteer_corpus();
        let cfg = TrainConfig::default();
        let err = train_baseline(&corpus, &[], &cfg).unwrap_err();
        assert!(err.to_string().contains("dev"), "{err}");
        assert!(train_baseline(&[], &corpus, &cfg).is_err());
        let zero = TrainConfig {
            epochs: 0,
            ..cfg.clone()
        };
        assert!(train_baseline(&corpus, &corpus, &zero).is_err());
        let bad_lr = TrainConfig {
            learning_rate: f64::NAN,
            ..cfg
        };
        assert!(train_baseline(&corpus, &corpus, &bad_lr).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let corpus = gazetteer_corpus();
        let model = train_baseline(&corpus, &corpus, &TrainConfig::default()).unwrap();
        let back = BaselineModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);
        let broken = model.to_json().replace(MODEL_FORMAT, "other-v9");
        assert!(BaselineModel::from_json(&broken).is_err());
    }

    #[test]
    fn token_f1_counts_entity_classes() {
        use BioLabel::*;
        assert_eq!(token_f1([(O, O), (O, O)]), 0.0);
        assert_eq!(token_f1([(BDrug, BDrug), (IDrug, IDrug), (O, O)]), 1.0);
        // tp=1, fp=1 (O predicted B), fn=1 (I predicted O)
        let f = token_f1([(BDrug, BDrug), (O, BDrug), (IDrug, O)]);
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn runs_from_labels() {
        use BioLabel::*;
        assert_eq!(
            entity_runs(&[BDrug, IDrug, O, BDrug, BDrug]),
            vec![(0, 2), (3, 4), (4, 5)]
        );
    }
}
