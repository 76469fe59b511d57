//! Entity-level precision, recall and F1 in strict and overlap modes.
//!
//! * strict: a gold and a predicted span match when start, end and entity
//!   type are all equal;
//! * overlap: they match when they share at least one character and have
//!   the same entity type.
//!
//! In both modes a span takes part in at most one match, and the matching
//! per tweet has maximum cardinality. Counts are summed over tweets
//! (micro average).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, SpanAnnotation};
use crate::error::{Error, Result};
use crate::io::{atomic_write, escape_tsv, write_err};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Strict,
    Overlap,
}

impl MatchMode {
    pub fn compatible(self, gold: &SpanAnnotation, pred: &SpanAnnotation) -> bool {
        if gold.entity_type != pred.entity_type {
            return false;
        }
        match self {
            MatchMode::Strict => gold.start == pred.start && gold.end == pred.end,
            MatchMode::Overlap => gold.overlaps(pred),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MatchMode::Strict => "strict",
            MatchMode::Overlap => "overlap",
        }
    }
}

impl std::str::FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(MatchMode::Strict),
            "overlap" => Ok(MatchMode::Overlap),
            _ => Err(Error::InvalidArgument(format!(
                "unknown match mode {s:?} (expected strict or overlap)"
            ))),
        }
    }
}

fn sorted_order(spans: &[SpanAnnotation]) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by_key(|&i| (spans[i].start, spans[i].end));
    for w in order.windows(2) {
        let (a, b) = (&spans[w[0]], &spans[w[1]]);
        if a.overlaps(b) {
            return Err(Error::OverlappingSpans {
                tweet_id: b.tweet_id.clone(),
                first: (a.start, a.end),
                second: (b.start, b.end),
            });
        }
    }
    Ok(order)
}

/// Maximum one-to-one matching between the spans of one tweet.
///
/// Returns `(gold index, pred index)` pairs sorted by gold position. A
/// left-to-right sweep pairs up spans first; augmenting paths then make the
/// matching maximum even when entity types differ.
pub fn match_spans(
    gold: &[SpanAnnotation],
    pred: &[SpanAnnotation],
    mode: MatchMode,
) -> Result<Vec<(usize, usize)>> {
    let go = sorted_order(gold)?;
    let po = sorted_order(pred)?;

    let mut gold_match: Vec<Option<usize>> = vec![None; gold.len()];
    let mut pred_match: Vec<Option<usize>> = vec![None; pred.len()];
    let (mut i, mut j) = (0, 0);
    while i < go.len() && j < po.len() {
        let (g, p) = (&gold[go[i]], &pred[po[j]]);
        if mode.compatible(g, p) {
            gold_match[go[i]] = Some(po[j]);
            pred_match[po[j]] = Some(go[i]);
            i += 1;
            j += 1;
        } else if g.end < p.end {
            i += 1;
        } else if p.end < g.end {
            j += 1;
        } else {
            i += 1;
            j += 1;
        }
    }

    let adj: Vec<Vec<usize>> = gold
        .iter()
        .map(|g| {
            po.iter()
                .copied()
                .filter(|&p| mode.compatible(g, &pred[p]))
                .collect()
        })
        .collect();
    for &g in &go {
        if gold_match[g].is_none() {
            let mut seen = vec![false; pred.len()];
            augment(g, &adj, &mut seen, &mut gold_match, &mut pred_match);
        }
    }

    Ok(go
        .iter()
        .filter_map(|&g| gold_match[g].map(|p| (g, p)))
        .collect())
}

fn augment(
    g: usize,
    adj: &[Vec<usize>],
    seen: &mut [bool],
    gold_match: &mut [Option<usize>],
    pred_match: &mut [Option<usize>],
) -> bool {
    for &p in &adj[g] {
        if seen[p] {
            continue;
        }
        seen[p] = true;
        let free = match pred_match[p] {
            None => true,
            Some(other) => augment(other, adj, seen, gold_match, pred_match),
        };
        if free {
            gold_match[g] = Some(p);
            pred_match[p] = Some(g);
            return true;
        }
    }
    false
}

/// A span inside a report; the tweet id is carried by the enclosing entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRef {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub entity_type: String,
}

impl From<&SpanAnnotation> for SpanRef {
    fn from(s: &SpanAnnotation) -> Self {
        Self {
            start: s.start,
            end: s.end,
            surface: s.surface.clone(),
            entity_type: s.entity_type.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TweetMatches {
    pub tweet_id: String,
    pub matched: Vec<(SpanRef, SpanRef)>,
    pub unmatched_gold: Vec<SpanRef>,
    pub unmatched_pred: Vec<SpanRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    #[serde(flatten)]
    pub scores: Scores,
    /// Tweets with at least one gold or predicted span, sorted by id.
    pub per_tweet: Vec<TweetMatches>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overlap: ModeReport,
    pub strict: ModeReport,
}

impl EvalReport {
    pub fn mode(&self, mode: MatchMode) -> &ModeReport {
        match mode {
            MatchMode::Strict => &self.strict,
            MatchMode::Overlap => &self.overlap,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialize");
        s.push('\n');
        s
    }

    /// Aligned summary table, values rounded to three decimals.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<8} {:>9} {:>7} {:>6} {:>6} {:>6} {:>6}",
            "mode", "precision", "recall", "f1", "tp", "fp", "fn"
        )
        .unwrap();
        for mode in [MatchMode::Overlap, MatchMode::Strict] {
            let s = &self.mode(mode).scores;
            writeln!(
                out,
                "{:<8} {:>9.3} {:>7.3} {:>6.3} {:>6} {:>6} {:>6}",
                mode.as_str(),
                s.precision,
                s.recall,
                s.f1,
                s.tp,
                s.fp,
                s.fn_
            )
            .unwrap();
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = self.to_json();
        atomic_write(path, |w| {
            w.write_all(json.as_bytes()).map_err(write_err(path))
        })
    }
}

fn evaluate_mode(
    grouped: &BTreeMap<&str, (Vec<SpanAnnotation>, Vec<SpanAnnotation>)>,
    mode: MatchMode,
) -> Result<ModeReport> {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut per_tweet = Vec::new();
    for (id, (gold, pred)) in grouped {
        let pairs = match_spans(gold, pred, mode)?;
        let mut gold_used = vec![false; gold.len()];
        let mut pred_used = vec![false; pred.len()];
        let matched = pairs
            .iter()
            .map(|&(g, p)| {
                gold_used[g] = true;
                pred_used[p] = true;
                (SpanRef::from(&gold[g]), SpanRef::from(&pred[p]))
            })
            .collect::<Vec<_>>();
        let unmatched = |spans: &[SpanAnnotation], used: &[bool]| -> Vec<SpanRef> {
            spans
                .iter()
                .zip(used)
                .filter(|(_, u)| !**u)
                .map(|(s, _)| SpanRef::from(s))
                .collect()
        };
        let unmatched_gold = unmatched(gold, &gold_used);
        let unmatched_pred = unmatched(pred, &pred_used);
        tp += matched.len();
        fp += unmatched_pred.len();
        fn_ += unmatched_gold.len();
        per_tweet.push(TweetMatches {
            tweet_id: id.to_string(),
            matched,
            unmatched_gold,
            unmatched_pred,
        });
    }
    Ok(ModeReport {
        scores: Scores::from_counts(tp, fp, fn_),
        per_tweet,
    })
}

/// Score predicted spans against the gold annotations of `gold`.
pub fn evaluate(gold: &Dataset, pred: &[SpanAnnotation]) -> Result<EvalReport> {
    let mut grouped: BTreeMap<&str, (Vec<SpanAnnotation>, Vec<SpanAnnotation>)> = BTreeMap::new();
    for (tweet, anns) in gold.iter() {
        if !anns.is_empty() {
            grouped.entry(&tweet.id).or_default().0 = anns.to_vec();
        }
    }
    for p in pred {
        let tweet = gold
            .get(&p.tweet_id)
            .ok_or_else(|| Error::UnknownTweet(p.tweet_id.clone()))?;
        grouped.entry(&tweet.id).or_default().1.push(p.clone());
    }
    for (g, p) in grouped.values_mut() {
        g.sort_by_key(|s| (s.start, s.end));
        p.sort_by_key(|s| (s.start, s.end));
    }
    Ok(EvalReport {
        overlap: evaluate_mode(&grouped, MatchMode::Overlap)?,
        strict: evaluate_mode(&grouped, MatchMode::Strict)?,
    })
}

/// Micro-averaged scores under a single matching mode.
pub fn scores(gold: &Dataset, pred: &[SpanAnnotation], mode: MatchMode) -> Result<Scores> {
    Ok(evaluate(gold, pred)?.mode(mode).scores)
}

const DIFF_HEADER: &str = "mode\ttweet_id\tkind\tstart\tend\tsurface\tcontext";
const CONTEXT_CHARS: usize = 20;

fn context(text: &str, start: usize, end: usize) -> String {
    let chars: Vec<char> = text.chars().collect();
    let lo = start.saturating_sub(CONTEXT_CHARS);
    let hi = (end + CONTEXT_CHARS).min(chars.len());
    let mut s = String::new();
    if lo > 0 {
        s.push('…');
    }
    s.extend(&chars[lo..start.min(chars.len())]);
    s.push('[');
    s.extend(&chars[start.min(chars.len())..end.min(chars.len())]);
    s.push(']');
    s.extend(&chars[end.min(chars.len())..hi]);
    if hi < chars.len() {
        s.push('…');
    }
    s
}

/// Every false positive and false negative, strict rows first, then overlap.
pub fn write_diff_to(
    w: &mut dyn Write,
    report: &EvalReport,
    tweets: &Dataset,
) -> std::io::Result<()> {
    writeln!(w, "{DIFF_HEADER}")?;
    for mode in [MatchMode::Strict, MatchMode::Overlap] {
        for entry in &report.mode(mode).per_tweet {
            let text = tweets
                .get(&entry.tweet_id)
                .map(|t| t.text.as_str())
                .unwrap_or("");
            let mut rows: Vec<(&str, &SpanRef)> = entry
                .unmatched_gold
                .iter()
                .map(|s| ("FN", s))
                .chain(entry.unmatched_pred.iter().map(|s| ("FP", s)))
                .collect();
            rows.sort_by_key(|(kind, s)| (s.start, s.end, *kind));
            for (kind, s) in rows {
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    mode.as_str(),
                    escape_tsv(&entry.tweet_id),
                    kind,
                    s.start,
                    s.end,
                    escape_tsv(&s.surface),
                    escape_tsv(&context(text, s.start, s.end))
                )?;
            }
        }
    }
    Ok(())
}

pub fn diff_report(report: &EvalReport, tweets: &Dataset, path: &Path) -> Result<()> {
    atomic_write(path, |w| {
        write_diff_to(w, report, tweets).map_err(write_err(path))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Tweet, DRUG};

    fn s(start: usize, end: usize) -> SpanAnnotation {
        SpanAnnotation::new("t", start, end, "", DRUG)
    }

    fn count(gold: &[SpanAnnotation], pred: &[SpanAnnotation], mode: MatchMode) -> usize {
        match_spans(gold, pred, mode).unwrap().len()
    }

    #[test]
    fn exact_match_counts_in_both_modes() {
        assert_eq!(count(&[s(5, 11)], &[s(5, 11)], MatchMode::Strict), 1);
        assert_eq!(count(&[s(5, 11)], &[s(5, 11)], MatchMode::Overlap), 1);
    }

    #[test]
    fn shifted_match_only_overlaps() {
        assert_eq!(count(&[s(5, 11)], &[s(7, 14)], MatchMode::Strict), 0);
        assert_eq!(count(&[s(5, 11)], &[s(7, 14)], MatchMode::Overlap), 1);
    }

    #[test]
    fn one_prediction_matches_one_gold() {
        let gold = [s(0, 4), s(10, 14)];
        assert_eq!(count(&gold, &[s(3, 11)], MatchMode::Overlap), 1);
        assert_eq!(count(&gold, &[s(3, 11)], MatchMode::Strict), 0);
    }

    #[test]
    fn entity_types_must_agree() {
        let mut g0 = s(0, 10);
        g0.entity_type = "x".into();
        let g1 = s(11, 20);
        let p0 = s(5, 15);
        let mut p1 = s(16, 18);
        p1.entity_type = "x".into();
        let pairs = match_spans(&[g0, g1], &[p0, p1], MatchMode::Overlap).unwrap();
        assert_eq!(pairs, vec![(1, 0)]);
    }

    #[test]
    fn overlapping_input_is_rejected() {
        assert!(match_spans(&[s(0, 5), s(3, 8)], &[], MatchMode::Strict).is_err());
        assert!(match_spans(&[], &[s(0, 5), s(4, 6)], MatchMode::Overlap).is_err());
    }

    fn dataset() -> Dataset {
        Dataset::new(vec![
            Tweet::new("a", "took Zofran and tylenol"),
            Tweet::new("b", "no drugs here"),
        ])
        .unwrap()
        .with_annotations(vec![
            SpanAnnotation::new("a", 5, 11, "Zofran", DRUG),
            SpanAnnotation::new("a", 16, 23, "tylenol", DRUG),
        ])
        .unwrap()
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let d = dataset();
        let gold: Vec<_> = d.annotations().cloned().collect();
        let r = evaluate(&d, &gold).unwrap();
        for m in [&r.strict, &r.overlap] {
            assert_eq!(
                (m.scores.precision, m.scores.recall, m.scores.f1),
                (1.0, 1.0, 1.0)
            );
        }
        assert!(r.render_text().contains("1.000"));

        let r = evaluate(&d, &[]).unwrap();
        assert_eq!(r.strict.scores, Scores::from_counts(0, 0, 2));
        assert_eq!((r.strict.scores.precision, r.strict.scores.f1), (0.0, 0.0));
    }

    #[test]
    fn unknown_prediction_tweet() {
        let err = evaluate(&dataset(), &[SpanAnnotation::new("zz", 0, 1, "x", DRUG)]);
        assert!(matches!(err, Err(Error::UnknownTweet(id)) if id == "zz"));
    }

    #[test]
    fn score_formulas() {
        let sc = Scores::from_counts(3, 1, 2);
        assert_eq!(sc.precision, 0.75);
        assert_eq!(sc.recall, 0.6);
        assert!((sc.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-15);
    }

    #[test]
    fn text_rounding_is_half_even() {
        let mut r = evaluate(&dataset(), &[]).unwrap();
        r.strict.scores.precision = 0.0625;
        r.strict.scores.recall = 0.1875;
        let text = r.render_text();
        assert!(text.contains("0.062") && text.contains("0.188"), "{text}");
    }

    #[test]
    fn diff_rows() {
        let d = dataset();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("diff.tsv");

        let gold: Vec<_> = d.annotations().cloned().collect();
        diff_report(&evaluate(&d, &gold).unwrap(), &d, &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            format!("{DIFF_HEADER}\n")
        );

        let mut pred = gold.clone();
        pred.push(SpanAnnotation::new("b", 3, 8, "drugs", DRUG));
        diff_report(&evaluate(&d, &pred).unwrap(), &d, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let body: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(body.len(), 2);
        assert!(body.iter().all(|l| l.contains("\tFP\t")));
        assert!(body[0].starts_with("strict\tb") && body[1].starts_with("overlap\tb"));

        let shifted = vec![
            SpanAnnotation::new("a", 6, 11, "ofran", DRUG),
            gold[1].clone(),
        ];
        diff_report(&evaluate(&d, &shifted).unwrap(), &d, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let body: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(body.len(), 2);
        assert!(body.iter().all(|l| l.starts_with("strict\t")));
        assert!(body[0].contains("\tFN\t") && body[1].contains("\tFP\t"));
        assert!(body[0].ends_with("took [Zofran] and tylenol"));
    }
}
