use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use medtag::corpus::{write_annotations, write_tweets, Dataset};
use medtag::synthetic::{generate, split_80_10_10};
use medtag::tagger::{load_prob_file, PROB_HEADER};
use medtag::tokenizer::load_tokenized;

const SUBCOMMANDS: [&str; 10] = [
    "tokenize",
    "bio",
    "train",
    "predict",
    "fuse",
    "decode",
    "search-weights",
    "split",
    "eval",
    "run",
];

fn medtag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medtag"))
        .args(args)
        .env_remove("MEDTAG_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = medtag(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    /// Synthetic train/dev/test sets written as tweets JSONL plus gold TSV.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (train, dev, test) = split_80_10_10(&generate(400, 5));
        for (name, d) in [("train", &train), ("dev", &dev), ("test", &test)] {
            write_set(dir.path(), name, d);
        }
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn tokenize(&self, set: &str) -> PathBuf {
        let out = self.path(&format!("{set}.tokens.jsonl"));
        ok(&[
            "tokenize",
            "--in",
            s(&self.path(&format!("{set}.jsonl"))),
            "--out",
            s(&out),
        ]);
        out
    }

    fn label(&self, set: &str) -> PathBuf {
        let tokens = self.tokenize(set);
        let out = self.path(&format!("{set}.labeled.jsonl"));
        ok(&[
            "bio",
            "--tokens",
            s(&tokens),
            "--spans",
            s(&self.path(&format!("{set}.tsv"))),
            "--out",
            s(&out),
        ]);
        out
    }
}

fn write_set(dir: &Path, name: &str, d: &Dataset) {
    write_tweets(&dir.join(format!("{name}.jsonl")), d.tweets()).unwrap();
    write_annotations(&dir.join(format!("{name}.tsv")), d.annotations()).unwrap();
}

fn report_f1(path: &Path, mode: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v[mode]["f1"].as_f64().unwrap()
}

/// Probability rows as the model bridge writes them: uniform logits, one
/// row per primary token.
fn uniform_probs(tokens: &Path, out: &Path) {
    let mut text = format!("{PROB_HEADER}\n");
    for t in load_tokenized(tokens).unwrap() {
        let offsets: Vec<_> = t
            .tokens
            .iter()
            .map(|k| serde_json::json!({"start": k.start, "end": k.end}))
            .collect();
        let rows = vec![vec![1.0 / 3.0; 3]; t.tokens.len()];
        let rec = serde_json::json!({"id": t.id, "tokens": offsets, "probs": rows});
        text.push_str(&rec.to_string());
        text.push('\n');
    }
    fs::write(out, text).unwrap();
}

#[test]
fn help_documents_every_flag_of_every_subcommand() {
    for cmd in SUBCOMMANDS {
        let o = ok(&[cmd, "--help"]);
        let help = String::from_utf8(o.stdout).unwrap();
        for line in help.lines().filter(|l| l.trim_start().starts_with("--")) {
            let described = line.trim().split_once("  ").is_some();
            assert!(described, "{cmd}: flag without description: {line:?}");
        }
    }
    ok(&["--help"]);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = medtag(&["fuse", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("--bogus") && err.contains("Usage:"), "{err}");
    assert_eq!(medtag(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn zero_iterations_names_the_flag() {
    let o = medtag(&[
        "search-weights",
        "--probs",
        "a",
        "--gold",
        "g",
        "--tokens",
        "t",
        "--iters",
        "0",
        "--out",
        "o",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--iters"), "{}", stderr(&o));
}

#[test]
fn full_chain_train_predict_fuse_decode_eval() {
    let f = Fixture::new();
    let train = f.label("train");
    let dev = f.label("dev");
    let test_tokens = f.tokenize("test");
    let model = f.path("model.json");
    ok(&[
        "train",
        "--labeled",
        s(&train),
        "--dev",
        s(&dev),
        "--seed",
        "3",
        "--out",
        s(&model),
    ]);
    let probs = f.path("probs.jsonl");
    ok(&[
        "predict",
        "--model",
        s(&model),
        "--tokens",
        s(&test_tokens),
        "--out",
        s(&probs),
    ]);

    let fused = f.path("fused.jsonl");
    ok(&[
        "fuse",
        "--probs",
        s(&probs),
        s(&probs),
        "--weights",
        "1,2",
        "--out",
        s(&fused),
    ]);
    assert_eq!(
        load_prob_file(&fused).unwrap(),
        load_prob_file(&probs).unwrap()
    );

    let spans = f.path("pred.tsv");
    ok(&[
        "decode",
        "--probs",
        s(&fused),
        "--tokens",
        s(&test_tokens),
        "--out",
        s(&spans),
    ]);
    let report = f.path("report.json");
    let diff = f.path("diff.tsv");
    let o = ok(&[
        "eval",
        "--gold",
        s(&f.path("test.tsv")),
        "--pred",
        s(&spans),
        "--tweets",
        s(&f.path("test.jsonl")),
        "--out",
        s(&report),
        "--diff",
        s(&diff),
    ]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("strict"));
    assert!(report_f1(&report, "strict") >= 0.9);
    assert!(fs::read_to_string(&diff)
        .unwrap()
        .starts_with("mode\ttweet_id"));
}

#[test]
fn eval_of_gold_against_itself_is_perfect() {
    let f = Fixture::new();
    let gold = f.path("test.tsv");
    let report = f.path("report.json");
    ok(&[
        "eval",
        "--gold",
        s(&gold),
        "--pred",
        s(&gold),
        "--tweets",
        s(&f.path("test.jsonl")),
        "--out",
        s(&report),
    ]);
    assert_eq!(report_f1(&report, "strict"), 1.0);
    assert_eq!(report_f1(&report, "overlap"), 1.0);
}

#[test]
fn bio_reverse_recovers_gold_spans() {
    let f = Fixture::new();
    let labeled = f.label("train");
    let back = f.path("back.tsv");
    ok(&[
        "bio",
        "--reverse",
        "--labeled",
        s(&labeled),
        "--out",
        s(&back),
    ]);
    assert_eq!(
        fs::read(&back).unwrap(),
        fs::read(f.path("train.tsv")).unwrap()
    );
}

#[test]
fn uniform_bridge_file_flows_through_fuse_and_eval() {
    let f = Fixture::new();
    let tokens = f.tokenize("test");
    let bridge = f.path("probs-bridge.jsonl");
    uniform_probs(&tokens, &bridge);
    load_prob_file(&bridge).unwrap();
    let fused = f.path("fused.jsonl");
    ok(&["fuse", "--probs", s(&bridge), "--mean", "--out", s(&fused)]);
    let spans = f.path("pred.tsv");
    ok(&[
        "decode",
        "--probs",
        s(&fused),
        "--tokens",
        s(&tokens),
        "--out",
        s(&spans),
    ]);
    let report = f.path("report.json");
    ok(&[
        "eval",
        "--gold",
        s(&f.path("test.tsv")),
        "--pred",
        s(&spans),
        "--tweets",
        s(&f.path("test.jsonl")),
        "--out",
        s(&report),
    ]);
    // Uniform rows decode to all-O, so nothing is predicted.
    assert_eq!(fs::read_to_string(&spans).unwrap(), "");
    assert_eq!(report_f1(&report, "strict"), 0.0);
}

#[test]
fn data_errors_exit_2_with_location_and_leave_no_output() {
    let f = Fixture::new();
    let bad = f.path("bad.tsv");
    let gold = fs::read_to_string(f.path("test.tsv")).unwrap();
    let mut lines: Vec<&str> = gold.lines().collect();
    let broken = lines[1].replacen('\t', "\t9999\t", 1);
    lines[1] = &broken;
    fs::write(&bad, lines.join("\n")).unwrap();
    let report = f.path("report.json");
    let o = medtag(&[
        "eval",
        "--gold",
        s(&f.path("test.tsv")),
        "--pred",
        s(&bad),
        "--tweets",
        s(&f.path("test.jsonl")),
        "--out",
        s(&report),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("bad.tsv:2"), "{}", stderr(&o));
    assert!(!report.exists());

    let probs = f.path("p.jsonl");
    fs::write(&probs, "#schema=medtag-probs-v1 classes=O,B-DRUG,I-DRUG\n{\"id\":\"x\",\"tokens\":[{\"start\":0,\"end\":1}],\"probs\":[[0.5,0.2,0.2]]}\n").unwrap();
    let out = f.path("fused.jsonl");
    let o = medtag(&["fuse", "--probs", s(&probs), "--mean", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn weight_count_mismatch_is_a_usage_error() {
    let f = Fixture::new();
    let tokens = f.tokenize("test");
    let p = f.path("u.jsonl");
    uniform_probs(&tokens, &p);
    let o = medtag(&[
        "fuse",
        "--probs",
        s(&p),
        s(&p),
        "--weights",
        "1",
        "--out",
        s(&f.path("o.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--weights"));
}

#[test]
fn search_weights_writes_report_and_ensemble() {
    let f = Fixture::new();
    let train = f.label("train");
    let dev = f.label("dev");
    let dev_tokens = f.tokenize("dev");
    let model = f.path("model.json");
    ok(&[
        "train",
        "--labeled",
        s(&train),
        "--dev",
        s(&dev),
        "--out",
        s(&model),
    ]);
    let probs = f.path("dev-probs.jsonl");
    ok(&[
        "predict",
        "--model",
        s(&model),
        "--tokens",
        s(&dev_tokens),
        "--out",
        s(&probs),
    ]);
    let uniform = f.path("dev-uniform.jsonl");
    uniform_probs(&dev_tokens, &uniform);
    let (report, ensemble) = (f.path("search.json"), f.path("ensemble.json"));
    let gold = f.path("dev.tsv");
    let args = [
        "search-weights",
        "--probs",
        s(&probs),
        s(&uniform),
        "--gold",
        s(&gold),
        "--tokens",
        s(&dev_tokens),
        "--low",
        "0",
        "--high",
        "2",
        "--step",
        "0.5",
        "--iters",
        "20",
        "--seed",
        "9",
        "--out",
        s(&report),
        "--ensemble-out",
        s(&ensemble),
    ];
    ok(&args);
    let first = fs::read(&report).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["trace"].as_array().unwrap().len(), 20);
    assert!(v["best_f1"].as_f64().unwrap() >= 0.9);
    assert!(ensemble.exists());
    ok(&args);
    assert_eq!(fs::read(&report).unwrap(), first);
}

#[test]
fn split_uses_seed_env_fallback() {
    let f = Fixture::new();
    let tweets = f.path("train.jsonl");
    let (a, b, c) = (f.path("a.tsv"), f.path("b.tsv"), f.path("c.tsv"));
    ok(&[
        "split",
        "--in",
        s(&tweets),
        "--k",
        "5",
        "--seed",
        "17",
        "--out",
        s(&a),
    ]);
    let o = Command::new(env!("CARGO_BIN_EXE_medtag"))
        .args(["split", "--in", s(&tweets), "--k", "5", "--out", s(&b)])
        .env("MEDTAG_SEED", "17")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    ok(&["split", "--in", s(&tweets), "--k", "5", "--out", s(&c)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert!(fs::read_to_string(&a)
        .unwrap()
        .starts_with("# seed=17 k=5\n"));
}

#[test]
fn run_is_idempotent() {
    let f = Fixture::new();
    let config = f.path("run.json");
    fs::write(
        &config,
        r#"{"mode": "out-of-fold-ensemble", "run_dir": "out", "seed": 4, "k": 3,
            "train": {"tweets": "train.jsonl", "annotations": "train.tsv"},
            "dev": {"tweets": "dev.jsonl", "annotations": "dev.tsv"},
            "test": {"tweets": "test.jsonl", "annotations": "test.tsv"}}"#,
    )
    .unwrap();
    let o = ok(&["run", "--config", s(&config)]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("strict"));
    let names = [
        "spans.tsv",
        "report.json",
        "probs-ensemble.jsonl",
        "folds.tsv",
    ];
    let first: Vec<Vec<u8>> = names
        .iter()
        .map(|n| fs::read(f.path("out").join(n)).unwrap())
        .collect();
    ok(&["run", "--config", s(&config)]);
    for (n, bytes) in names.iter().zip(&first) {
        assert_eq!(&fs::read(f.path("out").join(n)).unwrap(), bytes, "{n}");
    }
    assert!(report_f1(&f.path("out").join("report.json"), "strict") >= 0.9);

    fs::write(
        &config,
        r#"{"mode": "single", "run_dir": "out", "tset": {}}"#,
    )
    .unwrap();
    assert_eq!(
        medtag(&["run", "--config", s(&config)]).status.code(),
        Some(1)
    );
}
