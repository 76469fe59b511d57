//! Medication-mention extraction for tweets: offset-preserving
//! tokenization, span/BIO conversion, a baseline token tagger, probability
//! ensembles with weight search, out-of-fold runs and span-level scoring.

pub mod alignment;
pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod tagger;
pub mod tokenizer;

pub use error::{Error, ErrorClass, Result};
