//! Seeded synthetic tweet corpora with exact drug-mention annotations, for
//! tests, demos and smoke runs.

use std::collections::HashMap;

use crate::corpus::{Dataset, SpanAnnotation, Tweet, DRUG};
use crate::rng::SplitMix64;

/// Drug names used by [`generate`]. Some span two tokens.
pub const DRUG_NAMES: [&str; 30] = [
    "zofran",
    "ibuprofen",
    "tylenol",
    "advil",
    "xanax",
    "adderall",
    "concerta",
    "prozac",
    "zoloft",
    "lexapro",
    "benadryl",
    "melatonin",
    "nyquil",
    "vicodin",
    "percocet",
    "oxycodone",
    "morphine",
    "insulin",
    "metformin",
    "lisinopril",
    "aspirin",
    "claritin",
    "zyrtec",
    "valium",
    "ambien",
    "gabapentin",
    "vitamin d",
    "fish oil",
    "nitrous oxide",
    "vitamin b12",
];

const MENTION_TEMPLATES: [&str; 12] = [
    "just took {} and feeling better",
    "{} is the only thing that helps my headache",
    "ugh my doctor switched me to {} today",
    "does anyone else get weird dreams on {}?",
    "out of {} again, pharmacy closed #fml",
    "{} kicked in finally lol",
    "mom keeps telling me to take {}.",
    "#{} saved my week",
    "(took {}) going to bed",
    "{} and {} together is a bad idea",
    "@nurse_jo is {} safe with {}?",
    "day 3 on {} 😴😴",
];

const PLAIN_TEMPLATES: [&str; 8] = [
    "cant sleep again tonight",
    "my head hurts so much right now",
    "going to the pharmacy later",
    "this weather is making me sick",
    "doctor appointment at 3pm, wish me luck",
    "feeling better after a long nap 🙂",
    "who else is up at 4am #insomnia",
    "https://t.co/xyz new blog post on side effects",
];

fn cased(name: &str, rng: &mut SplitMix64) -> String {
    match rng.below(4) {
        0 => name.to_uppercase(),
        1 => {
            let mut c = name.chars();
            let first = c.next().expect("non-empty name");
            first.to_uppercase().chain(c).collect()
        }
        _ => name.to_string(),
    }
}

fn fill(id: &str, template: &str, rng: &mut SplitMix64) -> (Tweet, Vec<SpanAnnotation>) {
    let mut text = String::new();
    let mut spans = Vec::new();
    let mut pieces = template.split("{}").peekable();
    while let Some(piece) = pieces.next() {
        text.push_str(piece);
        if pieces.peek().is_some() {
            let name = cased(DRUG_NAMES[rng.below(DRUG_NAMES.len() as u64) as usize], rng);
            let start = text.chars().count();
            text.push_str(&name);
            let end = start + name.chars().count();
            spans.push(SpanAnnotation::new(id, start, end, name, DRUG));
        }
    }
    (Tweet::new(id, text), spans)
}

/// `n` tweets with ids `syn-0000`, `syn-0001`, ...; roughly 70% mention at
/// least one drug. Deterministic in `seed`.
pub fn generate(n: usize, seed: u64) -> Dataset {
    let mut rng = SplitMix64::new(seed);
    let mut tweets = Vec::with_capacity(n);
    let mut anns = Vec::new();
    for i in 0..n {
        let id = format!("syn-{i:04}");
        let template = if rng.below(10) < 7 {
            MENTION_TEMPLATES[rng.below(MENTION_TEMPLATES.len() as u64) as usize]
        } else {
            PLAIN_TEMPLATES[rng.below(PLAIN_TEMPLATES.len() as u64) as usize]
        };
        let (tweet, spans) = fill(&id, template, &mut rng);
        tweets.push(tweet);
        anns.extend(spans);
    }
    Dataset::new(tweets)
        .and_then(|d| d.with_annotations(anns))
        .expect("generated corpus is valid")
}

/// Split by position into consecutive train/dev/test parts of 80/10/10%.
pub fn split_80_10_10(dataset: &Dataset) -> (Dataset, Dataset, Dataset) {
    let n = dataset.len();
    let (a, b) = (n * 8 / 10, n * 9 / 10);
    let pos: HashMap<&str, usize> = dataset
        .tweets()
        .iter()
        .enumerate()
        .map(|(i, t)| (t.id.as_str(), i))
        .collect();
    (
        dataset.filter(|t| pos[t.id.as_str()] < a),
        dataset.filter(|t| (a..b).contains(&pos[t.id.as_str()])),
        dataset.filter(|t| pos[t.id.as_str()] >= b),
    )
}
