//! Offset-preserving rule-based tweet tokenizer.
//!
//! Tokenization runs in three passes over the original text:
//!
//! 1. split on runs of Unicode whitespace;
//! 2. peel prefix characters off the front and suffix characters off the
//!    back of each chunk, one single-character token each;
//! 3. inside what remains, cut out every occurrence of a custom token
//!    (case-sensitive, leftmost-longest, non-overlapping) as its own token.
//!
//! Offsets are character (Unicode scalar value) indices into the input.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::BioLabel;
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_lines, write_err};

/// Forced splits applied inside larger tokens. `\u{FEB14}` is a private-use
/// character that shows up glued to drug names in the source tweets.
pub const DEFAULT_CUSTOM_TOKENS: [&str; 7] = [
    "zofran",
    "Zofran",
    "Concerta",
    "shots",
    "nitrous",
    "\u{FEB14}",
    "/",
];

const ASCII_PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
    #[serde(skip)]
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerRules {
    custom_tokens: Vec<String>,
    custom_chars: Vec<Vec<char>>,
    prefix_chars: BTreeSet<char>,
    suffix_chars: BTreeSet<char>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RulesFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    custom_tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prefix_chars: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    suffix_chars: Option<String>,
}

impl TokenizerRules {
    pub fn new<S: Into<String>>(
        custom_tokens: impl IntoIterator<Item = S>,
        prefix_chars: &str,
        suffix_chars: &str,
    ) -> Result<Self> {
        let custom_tokens: Vec<String> = custom_tokens.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for t in &custom_tokens {
            if t.is_empty() {
                return Err(Error::InvalidArgument("empty custom token".into()));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate custom token {t:?}"
                )));
            }
        }
        let custom_chars = custom_tokens.iter().map(|t| t.chars().collect()).collect();
        Ok(Self {
            custom_tokens,
            custom_chars,
            prefix_chars: prefix_chars.chars().collect(),
            suffix_chars: suffix_chars.chars().collect(),
        })
    }

    pub fn custom_tokens(&self) -> &[String] {
        &self.custom_tokens
    }

    pub fn is_prefix(&self, c: char) -> bool {
        self.prefix_chars.contains(&c)
    }

    pub fn is_suffix(&self, c: char) -> bool {
        self.suffix_chars.contains(&c)
    }

    /// Parse a rules file. Missing keys keep their default values.
    pub fn from_json(json: &str) -> Result<Self> {
        let file: RulesFile =
            serde_json::from_str(json).map_err(|e| Error::Schema(format!("rules file: {e}")))?;
        let defaults = default_rules();
        let prefix: String = defaults.prefix_chars.iter().collect();
        let suffix: String = defaults.suffix_chars.iter().collect();
        TokenizerRules::new(
            file.custom_tokens.unwrap_or(defaults.custom_tokens),
            file.prefix_chars.as_deref().unwrap_or(&prefix),
            file.suffix_chars.as_deref().unwrap_or(&suffix),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.at(path.display().to_string(), 1))
    }

    pub fn to_json(&self) -> String {
        let file = RulesFile {
            custom_tokens: Some(self.custom_tokens.clone()),
            prefix_chars: Some(self.prefix_chars.iter().collect()),
            suffix_chars: Some(self.suffix_chars.iter().collect()),
        };
        serde_json::to_string_pretty(&file).expect("rules serialize")
    }

    /// Longest custom token starting at `chars[pos]` and ending by `limit`.
    fn custom_match(&self, chars: &[char], pos: usize, limit: usize) -> Option<usize> {
        self.custom_chars
            .iter()
            .filter(|c| pos + c.len() <= limit && chars[pos..pos + c.len()] == c[..])
            .map(Vec::len)
            .max()
    }
}

impl Default for TokenizerRules {
    fn default() -> Self {
        default_rules()
    }
}

/// The custom token list plus ASCII punctuation affixes. `#` and `@` split
/// only from the front of a chunk.
pub fn default_rules() -> TokenizerRules {
    let suffix: String = ASCII_PUNCTUATION
        .chars()
        .filter(|c| !matches!(c, '#' | '@'))
        .collect();
    TokenizerRules::new(DEFAULT_CUSTOM_TOKENS, ASCII_PUNCTUATION, &suffix)
        .expect("default rules are valid")
}

pub fn tokenize(text: &str, rules: &TokenizerRules) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        split_chunk(&chars, start, i, rules, &mut spans);
    }
    spans
        .into_iter()
        .enumerate()
        .map(|(index, (start, end))| Token {
            text: chars[start..end].iter().collect(),
            start,
            end,
            index,
        })
        .collect()
}

fn split_chunk(
    chars: &[char],
    mut lo: usize,
    mut hi: usize,
    rules: &TokenizerRules,
    out: &mut Vec<(usize, usize)>,
) {
    while lo < hi && rules.is_prefix(chars[lo]) {
        out.push((lo, lo + 1));
        lo += 1;
    }
    let mut suffixes = Vec::new();
    while hi > lo && rules.is_suffix(chars[hi - 1]) {
        suffixes.push((hi - 1, hi));
        hi -= 1;
    }

    let mut piece = lo;
    let mut pos = lo;
    while pos < hi {
        match rules.custom_match(chars, pos, hi) {
            Some(len) => {
                if piece < pos {
                    out.push((piece, pos));
                }
                out.push((pos, pos + len));
                pos += len;
                piece = pos;
            }
            None => pos += 1,
        }
    }
    if piece < hi {
        out.push((piece, hi));
    }
    out.extend(suffixes.into_iter().rev());
}

/// Project token labels onto model subtokens. `subtoken_map` holds
/// `(token index, subtoken count)` and must cover every token once.
///
/// The first subtoken keeps the token label; later subtokens of an entity
/// token become `I-DRUG`, later subtokens of an `O` token stay `O`.
pub fn project_labels_to_subtokens(
    labels: &[BioLabel],
    subtoken_map: &[(usize, usize)],
) -> Result<Vec<BioLabel>> {
    if labels.len() != subtoken_map.len() {
        return Err(Error::LengthMismatch {
            what: "subtoken map",
            expected: labels.len(),
            actual: subtoken_map.len(),
        });
    }
    let mut counts = vec![None; labels.len()];
    for &(token, count) in subtoken_map {
        if count == 0 {
            return Err(Error::InvalidArgument(format!(
                "token {token} has zero subtokens"
            )));
        }
        match counts.get_mut(token) {
            Some(slot @ None) => *slot = Some(count),
            Some(Some(_)) => {
                return Err(Error::InvalidArgument(format!(
                    "token {token} listed twice in subtoken map"
                )))
            }
            None => {
                return Err(Error::InvalidArgument(format!(
                    "token index {token} out of range"
                )))
            }
        }
    }
    let mut out = Vec::new();
    for (label, count) in labels.iter().zip(counts) {
        let count = count.expect("every slot filled: lengths match and no duplicates");
        out.push(*label);
        let rest = match label {
            BioLabel::O => BioLabel::O,
            BioLabel::BDrug | BioLabel::IDrug => BioLabel::IDrug,
        };
        out.extend(std::iter::repeat_n(rest, count - 1));
    }
    Ok(out)
}

/// A tweet with its tokens. Serialized as one JSONL line
/// `{"id", "text", "tokens": [{"text", "start", "end"}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedTweet {
    pub id: String,
    pub text: String,
    pub tokens: Vec<Token>,
}

impl TokenizedTweet {
    pub fn new(tweet: &crate::corpus::Tweet, rules: &TokenizerRules) -> Self {
        Self {
            id: tweet.id.clone(),
            text: tweet.text.clone(),
            tokens: tokenize(&tweet.text, rules),
        }
    }

    pub fn offsets(&self) -> Vec<(usize, usize)> {
        self.tokens.iter().map(|t| (t.start, t.end)).collect()
    }

    /// Check that offsets slice back to token texts and are ordered.
    pub fn validate(&self) -> Result<()> {
        validate_tokens(&self.id, &self.text, &self.tokens)
    }
}

pub(crate) fn validate_tokens(id: &str, text: &str, tokens: &[Token]) -> Result<()> {
    let chars: Vec<char> = text.chars().collect();
    let mut prev_end = 0;
    for (i, t) in tokens.iter().enumerate() {
        let bad = |message: String| Error::Alignment {
            tweet_id: id.to_string(),
            message,
        };
        if t.start >= t.end || t.end > chars.len() {
            return Err(bad(format!(
                "token {i} has invalid offsets [{}, {})",
                t.start, t.end
            )));
        }
        if t.start < prev_end {
            return Err(bad(format!(
                "token {i} overlaps or precedes token {}",
                i - 1
            )));
        }
        let slice: String = chars[t.start..t.end].iter().collect();
        if slice != t.text {
            return Err(bad(format!(
                "token {i} text {:?} does not match text slice {slice:?}",
                t.text
            )));
        }
        prev_end = t.end;
    }
    Ok(())
}

pub fn tokenize_all(
    tweets: &[crate::corpus::Tweet],
    rules: &TokenizerRules,
) -> Vec<TokenizedTweet> {
    tweets
        .iter()
        .map(|t| TokenizedTweet::new(t, rules))
        .collect()
}

pub fn write_tokenized_to(w: &mut dyn Write, tweets: &[TokenizedTweet]) -> std::io::Result<()> {
    for t in tweets {
        writeln!(w, "{}", serde_json::to_string(t).expect("tokens serialize"))?;
    }
    Ok(())
}

pub fn write_tokenized(path: &Path, tweets: &[TokenizedTweet]) -> Result<()> {
    atomic_write(path, |w| {
        write_tokenized_to(w, tweets).map_err(write_err(path))
    })
}

pub fn load_tokenized(path: &Path) -> Result<Vec<TokenizedTweet>> {
    let origin = path.display().to_string();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in read_lines(path)? {
        if line.trim().is_empty() {
            continue;
        }
        let mut t: TokenizedTweet = serde_json::from_str(&line)
            .map_err(|e| Error::Malformed(e.to_string()).at(&origin, n))?;
        for (i, tok) in t.tokens.iter_mut().enumerate() {
            tok.index = i;
        }
        t.validate().map_err(|e| e.at(&origin, n))?;
        if !seen.insert(t.id.clone()) {
            return Err(Error::DuplicateId(t.id).at(&origin, n));
        }
        out.push(t);
    }
    Ok(out)
}
