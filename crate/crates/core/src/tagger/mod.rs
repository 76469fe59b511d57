//! Per-token class probabilities: the matrix type shared by every model,
//! the probability file format, argmax decoding, and the native baseline
//! tagger.
//!
//! Probability rows always use the class order `[O, B-DRUG, I-DRUG]`.

mod baseline;
mod features;

pub use baseline::{predict_probs, softmax, token_f1, train_baseline, BaselineModel, TrainConfig};
pub use features::{Gazetteer, GazetteerTag, FEATURE_TEMPLATES};

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{repair_bio, BioLabel};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_lines, write_err};
use crate::tokenizer::TokenizedTweet;

pub const PROB_SCHEMA: &str = "medtag-probs-v1";
pub const PROB_HEADER: &str = "#schema=medtag-probs-v1 classes=O,B-DRUG,I-DRUG";

/// Maximum allowed distance of a row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    pub tweet_id: String,
    pub token_offsets: Vec<(usize, usize)>,
    pub rows: Vec<[f64; 3]>,
}

impl ProbMatrix {
    pub fn new(
        tweet_id: impl Into<String>,
        token_offsets: Vec<(usize, usize)>,
        rows: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let m = Self {
            tweet_id: tweet_id.into(),
            token_offsets,
            rows,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_offsets.len() != self.rows.len() {
            return Err(Error::Alignment {
                tweet_id: self.tweet_id.clone(),
                message: format!(
                    "{} token offsets but {} probability rows",
                    self.token_offsets.len(),
                    self.rows.len()
                ),
            });
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                return Err(Error::Schema(format!(
                    "tweet {:?} row {i}: probabilities must lie in [0, 1], got {row:?}",
                    self.tweet_id
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::RowSum {
                    tweet_id: self.tweet_id.clone(),
                    row: i,
                    sum,
                });
            }
        }
        Ok(())
    }

    /// Error unless this matrix was produced over exactly `tokens`.
    pub fn check_aligned(&self, tokens: &TokenizedTweet) -> Result<()> {
        if self.tweet_id != tokens.id {
            return Err(Error::Alignment {
                tweet_id: self.tweet_id.clone(),
                message: format!("paired with tokens of tweet {:?}", tokens.id),
            });
        }
        if self.token_offsets != tokens.offsets() {
            return Err(Error::Alignment {
                tweet_id: self.tweet_id.clone(),
                message: format!(
                    "{} probability rows do not match the {} tokens of the tokenization",
                    self.rows.len(),
                    tokens.tokens.len()
                ),
            });
        }
        Ok(())
    }
}

/// Index of the largest entry; ties go to the lower class index.
pub fn argmax(row: &[f64; 3]) -> usize {
    let mut best = 0;
    for i in 1..3 {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

/// Per-row argmax followed by BIO repair.
pub fn decode(matrix: &ProbMatrix) -> Vec<BioLabel> {
    let raw: Vec<BioLabel> = matrix
        .rows
        .iter()
        .map(|r| BioLabel::from_index(argmax(r)).expect("three classes"))
        .collect();
    repair_bio(&raw)
}

#[derive(Serialize, Deserialize)]
struct OffsetRecord {
    start: usize,
    end: usize,
}

#[derive(Serialize, Deserialize)]
struct ProbRecord {
    id: String,
    tokens: Vec<OffsetRecord>,
    probs: Vec<Vec<f64>>,
}

pub fn write_prob_file_to(w: &mut dyn Write, matrices: &[ProbMatrix]) -> std::io::Result<()> {
    writeln!(w, "{PROB_HEADER}")?;
    for m in matrices {
        let rec = ProbRecord {
            id: m.tweet_id.clone(),
            tokens: m
                .token_offsets
                .iter()
                .map(|&(start, end)| OffsetRecord { start, end })
                .collect(),
            probs: m.rows.iter().map(|r| r.to_vec()).collect(),
        };
        // serde_json prints the shortest decimal that parses back to the same
        // f64, so values survive the round trip bit for bit.
        writeln!(
            w,
            "{}",
            serde_json::to_string(&rec).expect("probs serialize")
        )?;
    }
    Ok(())
}

pub fn write_prob_file(path: &Path, matrices: &[ProbMatrix]) -> Result<()> {
    for m in matrices {
        m.validate()?;
    }
    atomic_write(path, |w| {
        write_prob_file_to(w, matrices).map_err(write_err(path))
    })
}

fn parse_prob_line(line: &str) -> Result<ProbMatrix> {
    let rec: ProbRecord = serde_json::from_str(line).map_err(|e| Error::Schema(e.to_string()))?;
    let mut rows = Vec::with_capacity(rec.probs.len());
    for (i, r) in rec.probs.iter().enumerate() {
        let row: [f64; 3] = r.as_slice().try_into().map_err(|_| {
            Error::Schema(format!(
                "tweet {:?} row {i} has {} entries, expected 3",
                rec.id,
                r.len()
            ))
        })?;
        rows.push(row);
    }
    let offsets = rec.tokens.iter().map(|t| (t.start, t.end)).collect();
    ProbMatrix::new(rec.id, offsets, rows)
}

/// Load and validate a probability file.
pub fn load_prob_file(path: &Path) -> Result<Vec<ProbMatrix>> {
    let origin = path.display().to_string();
    let mut lines = read_lines(path)?
        .into_iter()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.starts_with(&format!("#schema={PROB_SCHEMA}")) => {}
        Some((n, l)) => {
            return Err(Error::Schema(format!(
                "expected header starting with #schema={PROB_SCHEMA}, found {l:?}"
            ))
            .at(&origin, n))
        }
        None => return Err(Error::Schema("missing #schema header".into()).at(&origin, 1)),
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in lines {
        let m = parse_prob_line(&line).map_err(|e| e.at(&origin, n))?;
        if !seen.insert(m.tweet_id.clone()) {
            return Err(Error::DuplicateId(m.tweet_id).at(&origin, n));
        }
        out.push(m);
    }
    Ok(out)
}
