//! Conversion between character-span annotations and per-token BIO labels.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{sort_and_check_overlaps, SpanAnnotation, Tweet, DRUG};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_lines, write_err};
use crate::tokenizer::{tokenize, validate_tokens, Token, TokenizerRules};

/// Token label. The discriminant is the class index used in probability
/// rows: `O = 0`, `B-DRUG = 1`, `I-DRUG = 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BioLabel {
    #[serde(rename = "O")]
    O = 0,
    #[serde(rename = "B-DRUG")]
    BDrug = 1,
    #[serde(rename = "I-DRUG")]
    IDrug = 2,
}

impl BioLabel {
    pub const ALL: [BioLabel; 3] = [BioLabel::O, BioLabel::BDrug, BioLabel::IDrug];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<BioLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BioLabel::O => "O",
            BioLabel::BDrug => "B-DRUG",
            BioLabel::IDrug => "I-DRUG",
        }
    }

    pub fn is_entity(self) -> bool {
        self != BioLabel::O
    }
}

impl fmt::Display for BioLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BioLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Schema(format!("unknown label {s:?}")))
    }
}

/// Rewrite every `I-DRUG` that opens a sequence or follows `O` to `B-DRUG`.
pub fn repair_bio(labels: &[BioLabel]) -> Vec<BioLabel> {
    let mut prev = BioLabel::O;
    labels
        .iter()
        .map(|&l| {
            let fixed = if l == BioLabel::IDrug && prev == BioLabel::O {
                BioLabel::BDrug
            } else {
                l
            };
            prev = fixed;
            fixed
        })
        .collect()
}

pub fn is_well_formed(labels: &[BioLabel]) -> bool {
    let mut prev = BioLabel::O;
    labels.iter().all(|&l| {
        let ok = !(l == BioLabel::IDrug && prev == BioLabel::O);
        prev = l;
        ok
    })
}

/// Label tokens from character spans.
///
/// A token sharing at least one character with a span belongs to that
/// span's entity. When a span boundary does not coincide with a token
/// boundary the entity is widened (or narrowed, for boundaries in
/// whitespace) to whole tokens and a warning is returned; when two spans
/// touch the same token they merge into one entity.
pub fn spans_to_bio(
    tokens: &[Token],
    spans: &[SpanAnnotation],
) -> Result<(Vec<BioLabel>, Vec<String>)> {
    if let Some(first) = spans.first() {
        if let Some(other) = spans.iter().find(|s| s.tweet_id != first.tweet_id) {
            return Err(Error::MixedTweets(
                first.tweet_id.clone(),
                other.tweet_id.clone(),
            ));
        }
    }
    let mut spans = spans.to_vec();
    sort_and_check_overlaps(&mut spans)?;

    let mut labels = vec![BioLabel::O; tokens.len()];
    let mut claimed = vec![false; tokens.len()];
    let mut warnings = Vec::new();
    for span in &spans {
        let hit: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.start < span.end && span.start < t.end)
            .map(|(i, _)| i)
            .collect();
        let (Some(&first), Some(&last)) = (hit.first(), hit.last()) else {
            warnings.push(format!(
                "{}: span [{}, {}) covers no token; dropped",
                span.tweet_id, span.start, span.end
            ));
            continue;
        };
        let (tok_start, tok_end) = (tokens[first].start, tokens[last].end);
        if tok_start < span.start || tok_end > span.end {
            warnings.push(format!(
                "{}: span [{}, {}) cuts through a token; expanded to [{}, {})",
                span.tweet_id,
                span.start,
                span.end,
                tok_start.min(span.start),
                tok_end.max(span.end)
            ));
        }
        if tok_start > span.start || tok_end < span.end {
            warnings.push(format!(
                "{}: span [{}, {}) has a boundary in whitespace; trimmed to [{}, {})",
                span.tweet_id,
                span.start,
                span.end,
                tok_start.max(span.start),
                tok_end.min(span.end)
            ));
        }
        if claimed[first] {
            warnings.push(format!(
                "{}: span [{}, {}) shares a token with the previous span; merged",
                span.tweet_id, span.start, span.end
            ));
        }
        for (j, &i) in hit.iter().enumerate() {
            if claimed[i] {
                continue;
            }
            labels[i] = if j == 0 {
                BioLabel::BDrug
            } else {
                BioLabel::IDrug
            };
            claimed[i] = true;
        }
    }
    Ok((labels, warnings))
}

/// Turn each maximal `B-DRUG I-DRUG*` run into a span covering its tokens.
/// Labels are repaired first, so a stray `I-DRUG` opens a new entity.
pub fn bio_to_spans(
    tweet_id: &str,
    text: &str,
    tokens: &[Token],
    labels: &[BioLabel],
) -> Result<Vec<SpanAnnotation>> {
    if tokens.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: tokens.len(),
            actual: labels.len(),
        });
    }
    let labels = repair_bio(labels);
    let chars: Vec<char> = text.chars().collect();
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    let close = |run: Option<(usize, usize)>, spans: &mut Vec<SpanAnnotation>| {
        if let Some((s, e)) = run {
            let start = tokens[s].start;
            let end = tokens[e].end;
            let surface: String = chars
                .get(start..end)
                .map(|c| c.iter().collect())
                .unwrap_or_default();
            spans.push(SpanAnnotation::new(tweet_id, start, end, surface, DRUG));
        }
    };
    for (i, label) in labels.iter().enumerate() {
        match label {
            BioLabel::BDrug => {
                close(open.take(), &mut spans);
                open = Some((i, i));
            }
            BioLabel::IDrug => {
                if let Some((_, e)) = open.as_mut() {
                    *e = i;
                }
            }
            BioLabel::O => close(open.take(), &mut spans),
        }
    }
    close(open.take(), &mut spans);
    Ok(spans)
}

/// Tokens of one tweet with their labels. JSONL form:
/// `{"id", "text", "tokens": [{"text", "start", "end"}], "labels": ["O", ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledTweet {
    #[serde(rename = "id")]
    pub tweet_id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub labels: Vec<BioLabel>,
}

impl LabeledTweet {
    /// Labels are repaired on construction.
    pub fn new(
        tweet_id: impl Into<String>,
        text: impl Into<String>,
        tokens: Vec<Token>,
        labels: Vec<BioLabel>,
    ) -> Result<Self> {
        if tokens.len() != labels.len() {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: tokens.len(),
                actual: labels.len(),
            });
        }
        Ok(Self {
            tweet_id: tweet_id.into(),
            text: text.into(),
            tokens,
            labels: repair_bio(&labels),
        })
    }

    pub fn spans(&self) -> Result<Vec<SpanAnnotation>> {
        bio_to_spans(&self.tweet_id, &self.text, &self.tokens, &self.labels)
    }
}

/// Tokenize a tweet and label it from its gold spans.
pub fn label_tweet(
    tweet: &Tweet,
    spans: &[SpanAnnotation],
    rules: &TokenizerRules,
) -> Result<(LabeledTweet, Vec<String>)> {
    if let Some(other) = spans.iter().find(|s| s.tweet_id != tweet.id) {
        return Err(Error::MixedTweets(tweet.id.clone(), other.tweet_id.clone()));
    }
    let tokens = tokenize(&tweet.text, rules);
    let (labels, warnings) = spans_to_bio(&tokens, spans)?;
    Ok((
        LabeledTweet::new(tweet.id.clone(), tweet.text.clone(), tokens, labels)?,
        warnings,
    ))
}

pub fn write_labeled_to(w: &mut dyn Write, tweets: &[LabeledTweet]) -> std::io::Result<()> {
    for t in tweets {
        writeln!(w, "{}", serde_json::to_string(t).expect("labels serialize"))?;
    }
    Ok(())
}

pub fn write_labeled(path: &Path, tweets: &[LabeledTweet]) -> Result<()> {
    atomic_write(path, |w| {
        write_labeled_to(w, tweets).map_err(write_err(path))
    })
}

pub fn load_labeled(path: &Path) -> Result<Vec<LabeledTweet>> {
    let origin = path.display().to_string();
    let mut out = Vec::new();
    for (n, line) in read_lines(path)? {
        if line.trim().is_empty() {
            continue;
        }
        let raw: LabeledTweet = serde_json::from_str(&line)
            .map_err(|e| Error::Malformed(e.to_string()).at(&origin, n))?;
        let mut t = LabeledTweet::new(raw.tweet_id, raw.text, raw.tokens, raw.labels)
            .map_err(|e| e.at(&origin, n))?;
        for (i, tok) in t.tokens.iter_mut().enumerate() {
            tok.index = i;
        }
        validate_tokens(&t.tweet_id, &t.text, &t.tokens).map_err(|e| e.at(&origin, n))?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use BioLabel::*;

    fn tok(text: &str, start: usize, end: usize) -> Token {
        Token {
            text: text.into(),
            start,
            end,
            index: 0,
        }
    }

    fn span(start: usize, end: usize) -> SpanAnnotation {
        SpanAnnotation::new("t", start, end, "", DRUG)
    }

    #[test]
    fn single_token_entity() {
        let toks = [tok("took", 0, 4), tok("Zofran", 5, 11)];
        let (labels, warnings) = spans_to_bio(&toks, &[span(5, 11)]).unwrap();
        assert_eq!(labels, vec![O, BDrug]);
        assert!(warnings.is_empty());
    }

    #[test]
    fn multi_token_entity() {
        let toks = [tok("vitamin", 0, 7), tok("b6", 8, 10)];
        let (labels, warnings) = spans_to_bio(&toks, &[span(0, 10)]).unwrap();
        assert_eq!(labels, vec![BDrug, IDrug]);
        assert!(warnings.is_empty());
    }

    #[test]
    fn partial_token_expands_with_warning() {
        let toks = [tok("AZofranPump", 0, 11)];
        let (labels, warnings) = spans_to_bio(&toks, &[span(1, 7)]).unwrap();
        assert_eq!(labels, vec![BDrug]);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("expanded"));
    }

    #[test]
    fn whitespace_boundary_and_empty_cover_warn() {
        let toks = [tok("a", 0, 1), tok("b", 3, 4)];
        let (labels, w) = spans_to_bio(&toks, &[span(1, 4)]).unwrap();
        assert_eq!(labels, vec![O, BDrug]);
        assert_eq!(w.len(), 1);
        let (labels, w) = spans_to_bio(&toks, &[span(1, 3)]).unwrap();
        assert_eq!(labels, vec![O, O]);
        assert!(w[0].contains("dropped"));
    }

    #[test]
    fn two_spans_in_one_token_merge() {
        let toks = [tok("abcdef", 0, 6), tok("g", 7, 8)];
        let (labels, w) = spans_to_bio(&toks, &[span(0, 2), span(3, 8)]).unwrap();
        assert_eq!(labels, vec![BDrug, IDrug]);
        assert!(is_well_formed(&labels));
        assert!(w.iter().any(|m| m.contains("merged")));
    }

    #[test]
    fn span_errors() {
        let toks = [tok("abc", 0, 3)];
        assert!(matches!(
            spans_to_bio(&toks, &[span(0, 2), span(1, 3)]),
            Err(Error::OverlappingSpans { .. })
        ));
        let other = SpanAnnotation::new("u", 2, 3, "", DRUG);
        assert!(matches!(
            spans_to_bio(&toks, &[span(0, 1), other]),
            Err(Error::MixedTweets(..))
        ));
    }

    #[test]
    fn decode_runs_to_spans() {
        let text = "I vitamin b6 rock";
        let toks = [
            tok("I", 0, 1),
            tok("vitamin", 2, 9),
            tok("b6", 10, 12),
            tok("rock", 13, 17),
        ];
        let spans = bio_to_spans("t", text, &toks, &[O, BDrug, IDrug, O]).unwrap();
        assert_eq!(
            spans,
            vec![SpanAnnotation::new("t", 2, 12, "vitamin b6", DRUG)]
        );
        assert!(bio_to_spans("t", text, &toks, &[O; 4]).unwrap().is_empty());
        assert!(bio_to_spans("t", text, &toks, &[O; 3]).is_err());
    }

    #[test]
    fn consecutive_b_labels_open_new_entities() {
        let text = "ab cd";
        let toks = [tok("ab", 0, 2), tok("cd", 3, 5)];
        let spans = bio_to_spans("t", text, &toks, &[BDrug, BDrug]).unwrap();
        assert_eq!(
            spans,
            vec![
                SpanAnnotation::new("t", 0, 2, "ab", DRUG),
                SpanAnnotation::new("t", 3, 5, "cd", DRUG)
            ]
        );
    }

    #[test]
    fn repair_examples() {
        assert_eq!(repair_bio(&[IDrug, O]), vec![BDrug, O]);
        assert_eq!(repair_bio(&[O, IDrug, IDrug]), vec![O, BDrug, IDrug]);
        let ok = [O, BDrug, IDrug, BDrug, O];
        assert_eq!(repair_bio(&ok), ok.to_vec());
        assert!(repair_bio(&[]).is_empty());
    }

    #[test]
    fn label_strings() {
        for l in BioLabel::ALL {
            assert_eq!(l.as_str().parse::<BioLabel>().unwrap(), l);
            assert_eq!(BioLabel::from_index(l.index()), Some(l));
        }
        assert_eq!(serde_json::to_string(&BDrug).unwrap(), "\"B-DRUG\"");
        assert!("B-drug".parse::<BioLabel>().is_err());
    }

    #[test]
    fn labeled_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.jsonl");
        let rules = crate::tokenizer::default_rules();
        let tweet = Tweet::new("t1", "took vitamin b6 today");
        let (lt, w) = label_tweet(
            &tweet,
            &[SpanAnnotation::new("t1", 5, 15, "vitamin b6", DRUG)],
            &rules,
        )
        .unwrap();
        assert!(w.is_empty());
        write_labeled(&p, std::slice::from_ref(&lt)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(
            text.contains("\"labels\":[\"O\",\"B-DRUG\",\"I-DRUG\",\"O\"]"),
            "{text}"
        );
        let back = load_labeled(&p).unwrap();
        assert_eq!(back, vec![lt.clone()]);
        assert_eq!(back[0].spans().unwrap()[0].surface, "vitamin b6");
    }
}
