//! `medtag` command line. Every pipeline stage is a subcommand; see
//! `medtag <command> --help`.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data
//! validation error, 3 internal error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use medtag::alignment::{load_labeled, spans_to_bio, write_labeled, LabeledTweet};
use medtag::corpus::{
    load_annotations, load_dataset, load_tweets, split_folds, write_annotations, Dataset, Tweet,
};
use medtag::ensemble::{
    fuse_sets, search_weights, EnsembleConfig, SearchData, SearchStrategy, WeightGrid,
};
use medtag::eval::{diff_report, evaluate, MatchMode};
use medtag::pipeline::{self, align_to_tokens, decode_spans, RunConfig};
use medtag::tagger::{
    load_prob_file, predict_probs, train_baseline, write_prob_file, BaselineModel, ProbMatrix,
    TrainConfig,
};
use medtag::tokenizer::{
    default_rules, load_tokenized, tokenize_all, write_tokenized, TokenizedTweet, TokenizerRules,
};
use medtag::{Error, ErrorClass};

const SEED_ENV: &str = "MEDTAG_SEED";

#[derive(Parser)]
#[command(
    name = "medtag",
    version,
    about = "Medication mention extraction for tweets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize tweets into tokens with character offsets.
    Tokenize(TokenizeArgs),
    /// Convert gold spans to BIO labels over tokens, or labels back to spans.
    Bio(BioArgs),
    /// Train the baseline tagger with dev-set epoch selection.
    Train(TrainArgs),
    /// Write per-token class probabilities from a trained model.
    Predict(PredictArgs),
    /// Fuse member probability files into one, weighted or uniform.
    Fuse(FuseArgs),
    /// Decode a probability file to drug spans.
    Decode(DecodeArgs),
    /// Search ensemble weights on a dev set by entity F1.
    SearchWeights(SearchArgs),
    /// Assign tweets to k cross-validation folds.
    Split(SplitArgs),
    /// Score predicted spans against gold spans.
    Eval(EvalArgs),
    /// Run a whole pipeline from a JSON config.
    Run(RunArgs),
}

#[derive(Args)]
struct TokenizeArgs {
    /// Tweets, one JSON object per line with "id" and "text".
    #[arg(long = "in", value_name = "TWEETS")]
    input: PathBuf,
    /// Tokenizer rules JSON; built-in rules when omitted.
    #[arg(long, value_name = "RULES")]
    rules: Option<PathBuf>,
    /// Output tokens JSONL.
    #[arg(long, value_name = "TOKENS")]
    out: PathBuf,
}

#[derive(Args)]
struct BioArgs {
    /// Tokens JSONL from `tokenize`.
    #[arg(
        long,
        value_name = "TOKENS",
        required_unless_present = "reverse",
        conflicts_with = "reverse"
    )]
    tokens: Option<PathBuf>,
    /// Gold spans TSV.
    #[arg(
        long,
        value_name = "SPANS",
        required_unless_present = "reverse",
        conflicts_with = "reverse"
    )]
    spans: Option<PathBuf>,
    /// Convert labeled tweets back to spans instead.
    #[arg(long, requires = "labeled")]
    reverse: bool,
    /// Labeled JSONL to read with --reverse.
    #[arg(long, value_name = "LABELED", requires = "reverse")]
    labeled: Option<PathBuf>,
    /// Output: labeled JSONL, or spans TSV with --reverse.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled training tweets from `bio`.
    #[arg(long, value_name = "LABELED")]
    labeled: PathBuf,
    /// Labeled dev tweets for epoch selection.
    #[arg(long, value_name = "LABELED")]
    dev: PathBuf,
    /// Training seed.
    #[arg(long, env = SEED_ENV, default_value_t = pipeline::DEFAULT_SEED)]
    seed: u64,
    /// Training passes over the data.
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    /// Perceptron update step.
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    learning_rate: f64,
    /// Extra gazetteer names, comma separated.
    #[arg(long, value_delimiter = ',', value_name = "NAMES")]
    gazetteer: Vec<String>,
    /// Output model JSON.
    #[arg(long, value_name = "MODEL")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Model JSON from `train`.
    #[arg(long, value_name = "MODEL")]
    model: PathBuf,
    /// Tokens JSONL from `tokenize`.
    #[arg(long, value_name = "TOKENS")]
    tokens: PathBuf,
    /// Output probability file.
    #[arg(long, value_name = "PROBS")]
    out: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["weights", "mean"])))]
struct FuseArgs {
    /// Member probability files.
    #[arg(long, num_args = 1.., required = true, value_name = "PROBS")]
    probs: Vec<PathBuf>,
    /// One weight per member, comma separated.
    #[arg(long, value_delimiter = ',', value_name = "W")]
    weights: Vec<f64>,
    /// Equal weights for all members.
    #[arg(long)]
    mean: bool,
    /// Output probability file.
    #[arg(long, value_name = "PROBS")]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    /// Probability file.
    #[arg(long, value_name = "PROBS")]
    probs: PathBuf,
    /// Tokens JSONL the probabilities were computed over.
    #[arg(long, value_name = "TOKENS")]
    tokens: PathBuf,
    /// Output spans TSV.
    #[arg(long, value_name = "SPANS")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    Strict,
    Overlap,
}

impl From<Objective> for MatchMode {
    fn from(o: Objective) -> Self {
        match o {
            Objective::Strict => MatchMode::Strict,
            Objective::Overlap => MatchMode::Overlap,
        }
    }
}

#[derive(Args)]
struct SearchArgs {
    /// Member probability files over the dev tweets.
    #[arg(long, num_args = 1.., required = true, value_name = "PROBS")]
    probs: Vec<PathBuf>,
    /// Gold dev spans TSV.
    #[arg(long, value_name = "SPANS")]
    gold: PathBuf,
    /// Tokens JSONL of the dev tweets.
    #[arg(long, value_name = "TOKENS")]
    tokens: PathBuf,
    /// Smallest grid weight.
    #[arg(long, default_value_t = 0.0)]
    low: f64,
    /// Largest grid weight.
    #[arg(long, default_value_t = 2.0)]
    high: f64,
    /// Grid spacing.
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    /// Number of sampled weight vectors.
    #[arg(
        long,
        value_name = "N",
        value_parser = clap::value_parser!(u64).range(1..),
        required_unless_present = "exhaustive"
    )]
    iters: Option<u64>,
    /// Evaluate every grid point instead of sampling.
    #[arg(long)]
    exhaustive: bool,
    /// Sampling seed.
    #[arg(long, env = SEED_ENV, default_value_t = pipeline::DEFAULT_SEED)]
    seed: u64,
    /// Span matching used for the F1 objective.
    #[arg(long, value_enum, default_value = "strict")]
    objective: Objective,
    /// Output search report JSON.
    #[arg(long, value_name = "REPORT")]
    out: PathBuf,
    /// Also write the best weights as an ensemble config.
    #[arg(long, value_name = "ENSEMBLE")]
    ensemble_out: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    /// Tweets JSONL.
    #[arg(long = "in", value_name = "TWEETS")]
    input: PathBuf,
    /// Number of folds.
    #[arg(long, default_value_t = pipeline::DEFAULT_K)]
    k: usize,
    /// Shuffle seed.
    #[arg(long, env = SEED_ENV, default_value_t = pipeline::DEFAULT_SEED)]
    seed: u64,
    /// Output folds TSV.
    #[arg(long, value_name = "FOLDS")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Gold spans TSV.
    #[arg(long, value_name = "SPANS")]
    gold: PathBuf,
    /// Predicted spans TSV.
    #[arg(long, value_name = "SPANS")]
    pred: PathBuf,
    /// Tweets JSONL both span files refer to.
    #[arg(long, value_name = "TWEETS")]
    tweets: PathBuf,
    /// Output report JSON.
    #[arg(long, value_name = "REPORT")]
    out: PathBuf,
    /// Also write a per-error TSV listing misses and false alarms.
    #[arg(long, value_name = "DIFF")]
    diff: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Run config JSON.
    #[arg(long, value_name = "CONFIG")]
    config: PathBuf,
    /// Run seed; overrides the config. Falls back to MEDTAG_SEED when
    /// neither is given.
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Tokenize(a) => tokenize(a),
        Command::Bio(a) => bio(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Fuse(a) => fuse(a),
        Command::Decode(a) => decode(a),
        Command::SearchWeights(a) => search(a),
        Command::Split(a) => split(a),
        Command::Eval(a) => eval(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Internal => 3,
            })
        }
    }
}

fn load_rules(path: Option<&Path>) -> Result<TokenizerRules, Error> {
    path.map_or_else(|| Ok(default_rules()), TokenizerRules::load)
}

/// Tweets (with text) recovered from a tokens file, for span validation.
fn dataset_of(tokens: &[TokenizedTweet]) -> Result<Dataset, Error> {
    Dataset::new(
        tokens
            .iter()
            .map(|t| Tweet::new(t.id.clone(), t.text.clone()))
            .collect(),
    )
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn tokenize(a: TokenizeArgs) -> CliResult {
    let rules = load_rules(a.rules.as_deref())?;
    let tweets = load_tweets(&a.input)?;
    let tokens = tokenize_all(&tweets, &rules);
    write_tokenized(&a.out, &tokens)?;
    println!(
        "{} tweets, {} tokens",
        tokens.len(),
        tokens.iter().map(|t| t.tokens.len()).sum::<usize>()
    );
    Ok(())
}

fn bio(a: BioArgs) -> CliResult {
    if a.reverse {
        let labeled = load_labeled(a.labeled.as_deref().expect("required by clap"))?;
        let mut spans = Vec::new();
        for t in &labeled {
            spans.extend(t.spans()?);
        }
        write_annotations(&a.out, &spans)?;
        println!("{} tweets, {} spans", labeled.len(), spans.len());
        return Ok(());
    }
    let tokens = load_tokenized(a.tokens.as_deref().expect("required by clap"))?;
    let dataset = dataset_of(&tokens)?;
    let spans = load_annotations(a.spans.as_deref().expect("required by clap"), &dataset)?;
    let dataset = dataset.with_annotations(spans)?;
    let mut labeled = Vec::with_capacity(tokens.len());
    let mut warnings = Vec::new();
    for t in &tokens {
        let (labels, w) = spans_to_bio(&t.tokens, dataset.annotations_for(&t.id))?;
        warnings.extend(w.into_iter().map(|w| format!("{}: {w}", t.id)));
        labeled.push(LabeledTweet::new(
            t.id.clone(),
            t.text.clone(),
            t.tokens.clone(),
            labels,
        )?);
    }
    warn_all(&warnings);
    write_labeled(&a.out, &labeled)?;
    println!(
        "{} tweets, {} spans",
        labeled.len(),
        dataset.annotations().count()
    );
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let train = load_labeled(&a.labeled)?;
    let dev = load_labeled(&a.dev)?;
    let config = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        seed: a.seed,
        gazetteer: a.gazetteer,
    };
    let model = train_baseline(&train, &dev, &config)?;
    model.save(&a.out)?;
    if let Some(s) = model.summary() {
        println!(
            "best epoch {} of {}, dev token F1 {:.4}",
            s.best_epoch, s.epochs, s.dev_f1
        );
    }
    Ok(())
}

fn predict(a: PredictArgs) -> CliResult {
    let model = BaselineModel::load(&a.model)?;
    let tokens = load_tokenized(&a.tokens)?;
    let probs: Vec<_> = tokens.iter().map(|t| predict_probs(&model, t)).collect();
    write_prob_file(&a.out, &probs)?;
    println!("{} tweets", probs.len());
    Ok(())
}

fn member_names(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn fuse(a: FuseArgs) -> CliResult {
    let names = member_names(&a.probs);
    let config = if a.mean {
        EnsembleConfig::uniform(names)?
    } else if a.weights.len() != a.probs.len() {
        return Err(Failure::Usage(format!(
            "--weights has {} values for {} --probs files",
            a.weights.len(),
            a.probs.len()
        )));
    } else {
        EnsembleConfig::new(names, a.weights)?
    };
    let members = a
        .probs
        .iter()
        .map(|p| load_prob_file(p))
        .collect::<Result<Vec<_>, _>>()?;
    let fused = fuse_sets(&members, &config)?;
    write_prob_file(&a.out, &fused)?;
    println!("{} tweets from {} members", fused.len(), members.len());
    Ok(())
}

fn decode(a: DecodeArgs) -> CliResult {
    let tokens = load_tokenized(&a.tokens)?;
    let members = vec![load_prob_file(&a.probs)?];
    let probs: Vec<ProbMatrix> = align_to_tokens(&members, &tokens)?
        .into_iter()
        .map(|g| g[0].clone())
        .collect();
    let spans = decode_spans(&tokens, &probs)?;
    write_annotations(&a.out, &spans)?;
    println!("{} tweets, {} spans", tokens.len(), spans.len());
    Ok(())
}

fn search(a: SearchArgs) -> CliResult {
    let tokens = load_tokenized(&a.tokens)?;
    let dataset = dataset_of(&tokens)?;
    let gold = load_annotations(&a.gold, &dataset)?;
    let dataset = dataset.with_annotations(gold)?;
    let members = a
        .probs
        .iter()
        .map(|p| load_prob_file(p))
        .collect::<Result<Vec<_>, _>>()?;
    let grid = WeightGrid {
        low: a.low,
        high: a.high,
        step: a.step,
        iterations: a.iters.unwrap_or(0) as usize,
        seed: a.seed,
    };
    let strategy = if a.exhaustive {
        SearchStrategy::Exhaustive
    } else {
        SearchStrategy::Random
    };
    let data = SearchData {
        member_names: member_names(&a.probs),
        members: &members,
        tokens: &tokens,
        gold: &dataset,
    };
    let report = search_weights(&data, &grid, a.objective.into(), strategy)?;
    write_text(&a.out, &report.to_json())?;
    if let Some(p) = &a.ensemble_out {
        report.best.save(p)?;
    }
    let weights: Vec<String> = report
        .best
        .weights()
        .iter()
        .map(|w| w.to_string())
        .collect();
    println!(
        "best F1 {:.4} at weights {}",
        report.best_f1,
        weights.join(",")
    );
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    medtag::io::atomic_write(path, |w| {
        w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    })
}

fn split(a: SplitArgs) -> CliResult {
    let dataset = Dataset::new(load_tweets(&a.input)?)?;
    let folds = split_folds(&dataset, a.k, a.seed)?;
    folds.write(&a.out)?;
    let sizes: Vec<String> = folds.fold_sizes().iter().map(|s| s.to_string()).collect();
    println!("fold sizes {}", sizes.join(","));
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let gold = load_dataset(&a.tweets, Some(&a.gold))?;
    let bare = Dataset::new(gold.tweets().to_vec())?;
    let pred = load_annotations(&a.pred, &bare)?;
    let report = evaluate(&gold, &pred)?;
    report.write_json(&a.out)?;
    if let Some(d) = &a.diff {
        diff_report(&report, &gold, d)?;
    }
    print!("{}", report.render_text());
    Ok(())
}

fn run(a: RunArgs) -> CliResult {
    let mut config = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        config.seed = Some(s);
    } else if config.seed.is_none() {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let s = raw.trim().parse().map_err(|_| {
                Failure::Usage(format!(
                    "{SEED_ENV}={raw:?} is not a 64-bit unsigned integer"
                ))
            })?;
            config.seed = Some(s);
        }
    }
    let out = pipeline::run(&config)?;
    warn_all(&out.warnings);
    let by_tweet: HashMap<&str, usize> = out.spans.iter().fold(HashMap::new(), |mut m, s| {
        *m.entry(s.tweet_id.as_str()).or_insert(0) += 1;
        m
    });
    println!(
        "{} spans in {} tweets written to {}",
        out.spans.len(),
        by_tweet.len(),
        config.run_dir.display()
    );
    if let Some(r) = &out.report {
        print!("{}", r.render_text());
    }
    Ok(())
}
