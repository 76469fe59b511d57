use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::tokenizer::{default_rules, tokenize, Token};

/// Feature templates of the baseline tagger, in extraction order. Stored
/// in model files so a model can be checked against the running code.
pub const FEATURE_TEMPLATES: [&str; 9] = [
    "bias",
    "lower",
    "shape",
    "prefix3",
    "prefix4",
    "suffix3",
    "suffix4",
    "gazetteer",
    "prev_gazetteer",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GazetteerTag {
    /// First token of a gazetteer match.
    Begin,
    /// Later token of a multi-token match.
    Inside,
}

/// Known drug names, lowercased and stored as token sequences joined by a
/// single space.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Gazetteer {
    entries: BTreeSet<String>,
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a name given as free text; it is tokenized with the default rules.
    pub fn insert(&mut self, name: &str) {
        let tokens = tokenize(name, &default_rules());
        self.insert_tokens(&tokens);
    }

    pub fn insert_tokens(&mut self, tokens: &[Token]) {
        if tokens.is_empty() {
            return;
        }
        let key = tokens
            .iter()
            .map(|t| t.text.to_lowercase())
            .collect::<Vec<_>>()
            .join(" ");
        self.entries.insert(key);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(String::as_str)
    }

    fn max_tokens(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.split(' ').count())
            .max()
            .unwrap_or(0)
    }

    /// Longest-match scan, left to right.
    pub fn tag(&self, tokens: &[Token]) -> Vec<Option<GazetteerTag>> {
        let lower: Vec<String> = tokens.iter().map(|t| t.text.to_lowercase()).collect();
        let longest = self.max_tokens();
        let mut tags = vec![None; tokens.len()];
        let mut i = 0;
        while i < tokens.len() {
            let hit = (1..=longest.min(tokens.len() - i))
                .rev()
                .find(|&n| self.entries.contains(&lower[i..i + n].join(" ")));
            match hit {
                Some(n) => {
                    tags[i] = Some(GazetteerTag::Begin);
                    for t in &mut tags[i + 1..i + n] {
                        *t = Some(GazetteerTag::Inside);
                    }
                    i += n;
                }
                None => i += 1,
            }
        }
        tags
    }
}

fn shape(token: &str) -> String {
    let mut out = String::new();
    for c in token.chars() {
        let s = if c.is_uppercase() {
            'X'
        } else if c.is_lowercase() {
            'x'
        } else if c.is_numeric() {
            'd'
        } else {
            c
        };
        if !out.ends_with(s) {
            out.push(s);
        }
    }
    out
}

fn gaz_str(tag: Option<GazetteerTag>) -> &'static str {
    match tag {
        Some(GazetteerTag::Begin) => "B",
        Some(GazetteerTag::Inside) => "I",
        None => "O",
    }
}

/// Feature strings for every token of a tweet.
pub(crate) fn extract(tokens: &[Token], gazetteer: &Gazetteer) -> Vec<Vec<String>> {
    let gaz = gazetteer.tag(tokens);
    tokens
        .iter()
        .enumerate()
        .map(|(i, tok)| {
            let lower = tok.text.to_lowercase();
            let chars: Vec<char> = lower.chars().collect();
            let mut f = vec![
                "bias".to_string(),
                format!("lower={lower}"),
                format!("shape={}", shape(&tok.text)),
            ];
            for n in [3, 4] {
                if chars.len() >= n {
                    let pre: String = chars[..n].iter().collect();
                    let suf: String = chars[chars.len() - n..].iter().collect();
                    f.push(format!("prefix{n}={pre}"));
                    f.push(format!("suffix{n}={suf}"));
                }
            }
            f.push(format!("gazetteer={}", gaz_str(gaz[i])));
            let prev = if i == 0 { "BOS" } else { gaz_str(gaz[i - 1]) };
            f.push(format!("prev_gazetteer={prev}"));
            f
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(shape("Zofran"), "Xx");
        assert_eq!(shape("b6"), "xd");
        assert_eq!(shape("B12!"), "Xd!");
    }

    #[test]
    fn longest_gazetteer_match_wins() {
        let mut g = Gazetteer::new();
        g.insert("Vitamin");
        g.insert("vitamin B6");
        let toks = tokenize("more vitamin b6 and Vitamin c", &default_rules());
        let tags = g.tag(&toks);
        use GazetteerTag::*;
        assert_eq!(
            tags,
            vec![None, Some(Begin), Some(Inside), None, Some(Begin), None]
        );
    }

    #[test]
    fn features_cover_templates() {
        let mut g = Gazetteer::new();
        g.insert("zofran");
        let toks = tokenize("took Zofran", &default_rules());
        let f = extract(&toks, &g);
        assert!(f[1].contains(&"gazetteer=B".to_string()));
        assert!(f[1].contains(&"prev_gazetteer=O".to_string()));
        assert!(f[0].contains(&"prev_gazetteer=BOS".to_string()));
        assert!(f[1].contains(&"suffix4=fran".to_string()));
        assert!(f[0].contains(&"prefix4=took".to_string()));
    }
}
