//! Tweets, character-offset span annotations and fold partitioning.
//!
//! Character offsets everywhere in the toolkit count Unicode scalar values
//! (Rust `char`s), never bytes or UTF-16 units.
//!
//! File formats:
//! * tweets: JSONL, one `{"id": str, "text": str}` object per line;
//! * annotations: TSV `tweet_id, start, end, surface, entity_type`, no header.
//!   Tabs, newlines, carriage returns and backslashes inside `surface` are
//!   written as `\t`, `\n`, `\r` and `\\`;
//! * fold assignments: TSV `tweet_id, fold_index` after a `# seed=S k=K` line.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, escape_tsv, read_lines, unescape_tsv, write_err};
use crate::rng::SplitMix64;

/// Entity type used for every mention in this task.
pub const DRUG: &str = "drug";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tweet {
    pub id: String,
    pub text: String,
}

impl Tweet {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Slice by character offsets, `None` when out of bounds.
    pub fn slice(&self, start: usize, end: usize) -> Option<&str> {
        slice_chars(&self.text, start, end)
    }
}

/// Slice `text` at character offsets `[start, end)`.
pub fn slice_chars(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut byte_start = None;
    let mut count = 0;
    for (b, _) in text.char_indices() {
        if count == start {
            byte_start = Some(b);
        }
        if count == end {
            return byte_start.map(|s| &text[s..b]);
        }
        count += 1;
    }
    if count == end {
        let s = if start == count {
            text.len()
        } else {
            byte_start?
        };
        return Some(&text[s..]);
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub tweet_id: String,
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub entity_type: String,
}

impl SpanAnnotation {
    pub fn new(
        tweet_id: impl Into<String>,
        start: usize,
        end: usize,
        surface: impl Into<String>,
        entity_type: impl Into<String>,
    ) -> Self {
        Self {
            tweet_id: tweet_id.into(),
            start,
            end,
            surface: surface.into(),
            entity_type: entity_type.into(),
        }
    }

    pub fn overlaps(&self, other: &SpanAnnotation) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Check one annotation against the text of its tweet.
pub fn validate_annotation(tweet: &Tweet, ann: &SpanAnnotation) -> Result<()> {
    if ann.tweet_id != tweet.id {
        return Err(Error::MixedTweets(tweet.id.clone(), ann.tweet_id.clone()));
    }
    let len = tweet.char_len();
    if ann.start >= ann.end || ann.end > len {
        return Err(Error::SpanBounds {
            tweet_id: ann.tweet_id.clone(),
            start: ann.start,
            end: ann.end,
            len,
        });
    }
    let actual = tweet.slice(ann.start, ann.end).unwrap_or_default();
    if actual != ann.surface {
        return Err(Error::SliceMismatch {
            tweet_id: ann.tweet_id.clone(),
            start: ann.start,
            end: ann.end,
            expected: ann.surface.clone(),
            actual: actual.to_string(),
        });
    }
    Ok(())
}

/// Sort spans by start and reject any overlapping pair.
pub(crate) fn sort_and_check_overlaps(spans: &mut [SpanAnnotation]) -> Result<()> {
    spans.sort_by_key(|s| (s.start, s.end));
    for pair in spans.windows(2) {
        if pair[0].overlaps(&pair[1]) {
            return Err(Error::OverlappingSpans {
                tweet_id: pair[1].tweet_id.clone(),
                first: (pair[0].start, pair[0].end),
                second: (pair[1].start, pair[1].end),
            });
        }
    }
    Ok(())
}

/// An ordered set of tweets with validated annotations attached.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    tweets: Vec<Tweet>,
    index: HashMap<String, usize>,
    // Parallel to `tweets`, each list sorted by start.
    annotations: Vec<Vec<SpanAnnotation>>,
}

impl Dataset {
    pub fn new(tweets: Vec<Tweet>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tweets.len());
        for (i, t) in tweets.iter().enumerate() {
            if t.id.is_empty() {
                return Err(Error::Malformed("empty tweet id".into()));
            }
            if t.text.is_empty() {
                return Err(Error::EmptyText(t.id.clone()));
            }
            if index.insert(t.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(t.id.clone()));
            }
        }
        let annotations = vec![Vec::new(); tweets.len()];
        Ok(Self {
            tweets,
            index,
            annotations,
        })
    }

    /// Replace the annotations, validating each against its tweet.
    pub fn with_annotations(mut self, anns: Vec<SpanAnnotation>) -> Result<Self> {
        let mut grouped = vec![Vec::new(); self.tweets.len()];
        for ann in anns {
            let i = self.position(&ann.tweet_id)?;
            validate_annotation(&self.tweets[i], &ann)?;
            grouped[i].push(ann);
        }
        for spans in &mut grouped {
            sort_and_check_overlaps(spans)?;
        }
        self.annotations = grouped;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tweets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tweets.is_empty()
    }

    pub fn tweets(&self) -> &[Tweet] {
        &self.tweets
    }

    pub fn get(&self, id: &str) -> Option<&Tweet> {
        self.index.get(id).map(|&i| &self.tweets[i])
    }

    fn position(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownTweet(id.to_string()))
    }

    /// Annotations of one tweet, sorted by start. Empty for unknown ids.
    pub fn annotations_for(&self, id: &str) -> &[SpanAnnotation] {
        self.index
            .get(id)
            .map(|&i| self.annotations[i].as_slice())
            .unwrap_or(&[])
    }

    /// All annotations in tweet order.
    pub fn annotations(&self) -> impl Iterator<Item = &SpanAnnotation> {
        self.annotations.iter().flatten()
    }

    /// Tweets paired with their annotations, in dataset order.
    pub fn iter(&self) -> impl Iterator<Item = (&Tweet, &[SpanAnnotation])> {
        self.tweets
            .iter()
            .zip(self.annotations.iter().map(Vec::as_slice))
    }

    /// Keep the tweets (and their annotations) for which `keep` holds.
    pub fn filter<F: Fn(&Tweet) -> bool>(&self, keep: F) -> Dataset {
        let mut tweets = Vec::new();
        let mut annotations = Vec::new();
        for (t, a) in self.tweets.iter().zip(&self.annotations) {
            if keep(t) {
                tweets.push(t.clone());
                annotations.push(a.clone());
            }
        }
        let index = tweets
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id.clone(), i))
            .collect();
        Dataset {
            tweets,
            index,
            annotations,
        }
    }

    /// Concatenate two datasets. Tweet ids must stay unique.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let tweets = self.tweets.iter().chain(&other.tweets).cloned().collect();
        let anns = self
            .annotations()
            .chain(other.annotations())
            .cloned()
            .collect();
        Dataset::new(tweets)?.with_annotations(anns)
    }
}

#[derive(Deserialize)]
struct TweetRecord {
    id: String,
    text: String,
}

/// Parse tweets from JSONL lines. Blank lines are skipped.
pub fn parse_tweets<'a, I>(lines: I, origin: &str) -> Result<Vec<Tweet>>
where
    I: IntoIterator<Item = (usize, &'a str)>,
{
    let mut tweets = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TweetRecord = serde_json::from_str(line)
            .map_err(|e| Error::Malformed(e.to_string()).at(origin, lineno))?;
        if rec.id.is_empty() {
            return Err(Error::Malformed("empty tweet id".into()).at(origin, lineno));
        }
        if rec.text.is_empty() {
            return Err(Error::EmptyText(rec.id).at(origin, lineno));
        }
        if seen.insert(rec.id.clone(), lineno).is_some() {
            return Err(Error::DuplicateId(rec.id).at(origin, lineno));
        }
        tweets.push(Tweet::new(rec.id, rec.text));
    }
    Ok(tweets)
}

pub fn load_tweets(path: &Path) -> Result<Vec<Tweet>> {
    let lines = read_lines(path)?;
    parse_tweets(
        lines.iter().map(|(n, l)| (*n, l.as_str())),
        &path.display().to_string(),
    )
}

/// Tweets file plus an optional annotations file, as one validated dataset.
pub fn load_dataset(tweets: &Path, annotations: Option<&Path>) -> Result<Dataset> {
    let ds = Dataset::new(load_tweets(tweets)?)?;
    match annotations {
        Some(p) => {
            let anns = load_annotations(p, &ds)?;
            ds.with_annotations(anns)
        }
        None => Ok(ds),
    }
}

pub fn write_tweets_to(w: &mut dyn Write, tweets: &[Tweet]) -> std::io::Result<()> {
    for t in tweets {
        let line = serde_json::json!({ "id": t.id, "text": t.text });
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_tweets(path: &Path, tweets: &[Tweet]) -> Result<()> {
    atomic_write(path, |w| {
        write_tweets_to(w, tweets).map_err(write_err(path))
    })
}

fn parse_annotation_line(line: &str) -> Result<SpanAnnotation> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 5 {
        return Err(Error::Malformed(format!(
            "expected 5 tab-separated columns, found {}",
            cols.len()
        )));
    }
    let offset = |s: &str, name: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Malformed(format!("{name} is not a character index: {s:?}")))
    };
    Ok(SpanAnnotation {
        tweet_id: unescape_tsv(cols[0])?,
        start: offset(cols[1], "start")?,
        end: offset(cols[2], "end")?,
        surface: unescape_tsv(cols[3])?,
        entity_type: unescape_tsv(cols[4])?,
    })
}

/// Load annotations and validate each one against `dataset`: the tweet must
/// exist, the offsets must be in range, the slice must equal the surface
/// exactly, and spans of one tweet must not overlap.
pub fn load_annotations(path: &Path, dataset: &Dataset) -> Result<Vec<SpanAnnotation>> {
    let origin = path.display().to_string();
    let mut out = Vec::new();
    let mut by_tweet: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (lineno, line) in read_lines(path)? {
        if line.trim().is_empty() {
            continue;
        }
        let ann = parse_annotation_line(&line).map_err(|e| e.at(&origin, lineno))?;
        let pos = dataset
            .position(&ann.tweet_id)
            .map_err(|e| e.at(&origin, lineno))?;
        validate_annotation(&dataset.tweets[pos], &ann).map_err(|e| e.at(&origin, lineno))?;
        by_tweet.entry(pos).or_default().push((out.len(), lineno));
        out.push(ann);
    }
    for entries in by_tweet.values_mut() {
        entries.sort_by_key(|&(i, _)| (out[i].start, out[i].end));
        for pair in entries.windows(2) {
            let (a, b) = (&out[pair[0].0], &out[pair[1].0]);
            if a.overlaps(b) {
                return Err(Error::OverlappingSpans {
                    tweet_id: b.tweet_id.clone(),
                    first: (a.start, a.end),
                    second: (b.start, b.end),
                }
                .at(&origin, pair[1].1));
            }
        }
    }
    Ok(out)
}

pub fn write_annotations_to<'a, I>(w: &mut dyn Write, anns: I) -> std::io::Result<()>
where
    I: IntoIterator<Item = &'a SpanAnnotation>,
{
    for a in anns {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            escape_tsv(&a.tweet_id),
            a.start,
            a.end,
            escape_tsv(&a.surface),
            escape_tsv(&a.entity_type)
        )?;
    }
    Ok(())
}

pub fn write_annotations<'a, I>(path: &Path, anns: I) -> Result<()>
where
    I: IntoIterator<Item = &'a SpanAnnotation>,
{
    atomic_write(path, |w| {
        write_annotations_to(w, anns).map_err(write_err(path))
    })
}

/// Assignment of every tweet of a dataset to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub seed: u64,
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn write_to(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "# seed={} k={}", self.seed, self.k)?;
        for (id, fold) in &self.assignment {
            writeln!(w, "{}\t{fold}", escape_tsv(id))?;
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| self.write_to(w).map_err(write_err(path)))
    }

    pub fn load(path: &Path) -> Result<FoldAssignment> {
        let origin = path.display().to_string();
        let lines = read_lines(path)?;
        let mut iter = lines.iter().filter(|(_, l)| !l.trim().is_empty());
        let (hn, header) = iter
            .next()
            .ok_or_else(|| Error::Malformed("missing header".into()).at(&origin, 1))?;
        let (seed, k) = parse_fold_header(header).map_err(|e| e.at(&origin, *hn))?;
        let mut assignment = BTreeMap::new();
        for (n, line) in iter {
            let (id, fold) = line.split_once('\t').ok_or_else(|| {
                Error::Malformed("expected tweet_id<TAB>fold".into()).at(&origin, *n)
            })?;
            let id = unescape_tsv(id).map_err(|e| e.at(&origin, *n))?;
            let fold: usize = fold.parse().map_err(|_| {
                Error::Malformed(format!("bad fold index {fold:?}")).at(&origin, *n)
            })?;
            if fold >= k {
                return Err(
                    Error::Malformed(format!("fold {fold} out of range for k={k}")).at(&origin, *n),
                );
            }
            if assignment.insert(id.clone(), fold).is_some() {
                return Err(Error::DuplicateId(id).at(&origin, *n));
            }
        }
        Ok(FoldAssignment {
            seed,
            k,
            assignment,
        })
    }
}

fn parse_fold_header(line: &str) -> Result<(u64, usize)> {
    let bad = || Error::Malformed(format!("expected '# seed=S k=K', found {line:?}"));
    let rest = line.strip_prefix('#').ok_or_else(bad)?;
    let mut seed = None;
    let mut k = None;
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("seed", v)) => seed = v.parse().ok(),
            Some(("k", v)) => k = v.parse().ok(),
            _ => {}
        }
    }
    Ok((seed.ok_or_else(bad)?, k.ok_or_else(bad)?))
}

/// Shuffle the lexicographically sorted tweet ids with [`SplitMix64`] seeded
/// by `seed`, then deal them round-robin into `k` folds.
pub fn split_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "k must be in [2, {}], got {k}",
            dataset.len()
        )));
    }
    let mut ids: Vec<&str> = dataset.tweets().iter().map(|t| t.id.as_str()).collect();
    ids.sort_unstable();
    SplitMix64::new(seed).shuffle(&mut ids);
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(FoldAssignment {
        seed,
        k,
        assignment,
    })
}

/// Split into (train, validation) where validation is fold `held_out`.
pub fn fold_views(
    dataset: &Dataset,
    folds: &FoldAssignment,
    held_out: usize,
) -> Result<(Dataset, Dataset)> {
    if held_out >= folds.k {
        return Err(Error::InvalidArgument(format!(
            "held-out fold {held_out} out of range for k={}",
            folds.k
        )));
    }
    for t in dataset.tweets() {
        if folds.fold_of(&t.id).is_none() {
            return Err(Error::UnknownTweet(t.id.clone()));
        }
    }
    let train = dataset.filter(|t| folds.fold_of(&t.id) != Some(held_out));
    let valid = dataset.filter(|t| folds.fold_of(&t.id) == Some(held_out));
    Ok((train, valid))
}
