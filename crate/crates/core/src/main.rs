//! `tabaudit` command-line entry point.
//!
//! The audit is staged through files: `build-vocab` → `train` → `analyze` →
//! `epsilon`. Every flag can also be given in a TOML config file (`--config`)
//! using the flag name as key, either at the top level or in a section named
//! after the command; flags override the command section, which overrides
//! the top level.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use tabaudit::corpus::{
    build_vocab_topk, build_vocab_user_threshold, encode, ingest, Corpus, EncodedCorpus,
    Vocabulary,
};
use tabaudit::extractor::{ExtractionConfig, DEFAULT_BATCH_SIZE};
use tabaudit::lm::{
    train_ngram, AdapterModel, LanguageModel, StoredModel, DEFAULT_LAMBDAS, DEFAULT_ORDER,
};
use tabaudit::metrics::{
    annotate_public_comparison, epsilon_from_perplexities, epsilon_items, owner_users,
    ScoreItem,
};
use tabaudit::pipeline::{Executor, PartitionPlan, Task, TaskOutput, WORKERS_ENV};
use tabaudit::stats::{
    aggregate_runs, assemble_report, export, filter_singleton, filter_unique, import,
    LeakageReport, ReportFormat,
};
use tabaudit::TOOL_VERSION;

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] tabaudit::Error),
}

type CliResult<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn file_err(path: &Path, e: io::Error) -> Failure {
    Failure::Runtime(tabaudit::Error::File {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Parser)]
#[command(name = "tabaudit", version, about = "Audit a language model for training-data leakage")]
struct Cli {
    /// TOML file supplying defaults for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary file from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Train the built-in n-gram model and write a model file.
    Train(TrainArgs),
    /// Extract the sequences the model reproduces and write a leakage report.
    Analyze(AnalyzeArgs),
    /// Compute the leakage epsilon of a report against a public model.
    Epsilon(EpsilonArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// JSONL corpus (`user_id`, optional `doc_id`, `text` or `tokens`).
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Drop repeated sentences before use.
    #[arg(long)]
    dedup: bool,
}

#[derive(Args)]
#[group(multiple = false)]
struct PolicyArgs {
    /// Keep the K most frequent tokens.
    #[arg(long, value_name = "K")]
    topk: Option<usize>,
    /// Keep tokens used by at least M distinct users.
    #[arg(long, value_name = "M")]
    user_threshold: Option<usize>,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Output vocabulary file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NgramArgs {
    /// N-gram order.
    #[arg(long)]
    order: Option<usize>,
    /// Comma-separated interpolation weights λ0..λN.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    lambdas: Option<Vec<f64>>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Vocabulary file.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    #[command(flatten)]
    ngram: NgramArgs,
    /// Output model file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[group(multiple = false)]
struct SourceArgs {
    /// Load a model file.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Shell command serving an external model.
    #[arg(long, value_name = "CMD")]
    adapter: Option<String>,
    /// Train the built-in n-gram model on the corpus.
    #[arg(long)]
    train_ngram: bool,
}

#[derive(Args)]
struct PipelineArgs {
    /// Worker threads (also TABAUDIT_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
    /// Work partitions (defaults to the worker count).
    #[arg(long)]
    partitions: Option<usize>,
    /// Model queries per batch.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum RowFilter {
    None,
    Unique,
    Singleton,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Vocabulary file.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    ngram: NgramArgs,
    /// Top-k width of the attack.
    #[arg(long)]
    k: Option<usize>,
    /// Drop runs shorter than this.
    #[arg(long)]
    min_run_len: Option<usize>,
    /// Ignore predictions whose top-1 perplexity exceeds this value.
    #[arg(long)]
    confidence_threshold: Option<f64>,
    /// Count correctly predicted unknown tokens.
    #[arg(long)]
    count_unk_targets: bool,
    /// Replace sequences and contexts by their lengths.
    #[arg(long)]
    redact: bool,
    /// Keep only some rows.
    #[arg(long, value_enum)]
    filter: Option<RowFilter>,
    /// Model file used to add public-perplexity columns.
    #[arg(long, value_name = "FILE")]
    public_model: Option<PathBuf>,
    /// Log-ratio at or below which a row is marked plausibly public.
    #[arg(long)]
    flag_threshold: Option<f64>,
    /// Report format.
    #[arg(long, value_enum)]
    format: Option<ReportFormat>,
    /// Report file (standard output when absent).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// JSON summary file.
    #[arg(long, value_name = "FILE")]
    summary: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
#[group(multiple = false)]
struct PublicArgs {
    /// Public model file.
    #[arg(long, value_name = "FILE")]
    public_model: Option<PathBuf>,
    /// Shell command serving the public model.
    #[arg(long, value_name = "CMD")]
    public_adapter: Option<String>,
    /// Retrain the n-gram model without the users owning the report rows.
    #[arg(long)]
    leave_out: bool,
}

#[derive(Args)]
struct EpsilonArgs {
    /// Leakage report written by `analyze`.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Report format (inferred from the extension when absent).
    #[arg(long, value_enum)]
    format: Option<ReportFormat>,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Vocabulary file.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    public: PublicArgs,
    #[command(flatten)]
    ngram: NgramArgs,
    /// Epsilon JSON file (standard output when absent).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

/// Every configurable setting; flags and config sections both map here.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct Settings {
    corpus: Option<PathBuf>,
    dedup: Option<bool>,
    topk: Option<usize>,
    user_threshold: Option<usize>,
    vocab: Option<PathBuf>,
    model: Option<PathBuf>,
    adapter: Option<String>,
    train_ngram: Option<bool>,
    order: Option<usize>,
    lambdas: Option<Vec<f64>>,
    k: Option<usize>,
    min_run_len: Option<usize>,
    confidence_threshold: Option<f64>,
    count_unk_targets: Option<bool>,
    redact: Option<bool>,
    filter: Option<RowFilter>,
    public_model: Option<PathBuf>,
    public_adapter: Option<String>,
    leave_out: Option<bool>,
    flag_threshold: Option<f64>,
    format: Option<ReportFormat>,
    report: Option<PathBuf>,
    out: Option<PathBuf>,
    summary: Option<PathBuf>,
    workers: Option<usize>,
    partitions: Option<usize>,
    batch_size: Option<usize>,
}

impl Settings {
    /// Drops every setting of a mutually exclusive group that the command
    /// line already chose a member of, so a flag replaces the whole group.
    fn yield_groups_to(mut self, flags: &Settings) -> Settings {
        if flags.topk.is_some() || flags.user_threshold.is_some() {
            self.topk = None;
            self.user_threshold = None;
        }
        if flags.model.is_some() || flags.adapter.is_some() || flags.train_ngram.is_some() {
            self.model = None;
            self.adapter = None;
            self.train_ngram = None;
        }
        if flags.public_model.is_some()
            || flags.public_adapter.is_some()
            || flags.leave_out.is_some()
        {
            self.public_model = None;
            self.public_adapter = None;
            self.leave_out = None;
        }
        self
    }
}

macro_rules! overlay {
    ($hi:expr, $lo:expr; $($f:ident),* $(,)?) => {
        Settings { $($f: $hi.$f.or($lo.$f),)* }
    };
}

impl Settings {
    /// Fields of `self`, falling back to `lower`.
    fn over(self, lower: Settings) -> Settings {
        overlay!(self, lower;
            corpus, dedup, topk, user_threshold, vocab, model, adapter, train_ngram,
            order, lambdas, k, min_run_len, confidence_threshold, count_unk_targets,
            redact, filter, public_model, public_adapter, leave_out, flag_threshold,
            format, report, out, summary, workers, partitions, batch_size)
    }

    fn flag(b: bool) -> Option<bool> {
        b.then_some(true)
    }

    fn set(v: Option<bool>) -> bool {
        v.unwrap_or(false)
    }

    fn with_corpus(mut self, a: CorpusArgs) -> Self {
        self.corpus = a.corpus;
        self.dedup = Self::flag(a.dedup);
        self
    }

    fn with_ngram(mut self, a: NgramArgs) -> Self {
        self.order = a.order;
        self.lambdas = a.lambdas;
        self
    }

    fn with_source(mut self, a: SourceArgs) -> Self {
        self.model = a.model;
        self.adapter = a.adapter;
        self.train_ngram = Self::flag(a.train_ngram);
        self
    }

    fn with_pipeline(mut self, a: PipelineArgs) -> Self {
        self.workers = a.workers;
        self.partitions = a.partitions;
        self.batch_size = a.batch_size;
        self
    }

    fn require<'a, T>(v: &'a Option<T>, name: &str) -> CliResult<&'a T> {
        v.as_ref().ok_or_else(|| usage(format!("--{name} is required")))
    }
}

const SECTIONS: [&str; 4] = ["build-vocab", "train", "analyze", "epsilon"];

/// Reads the config file and returns the settings for `command`.
fn load_config(path: &Path, command: &str) -> CliResult<Settings> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let parse = |t: toml::Table, what: &str| -> CliResult<Settings> {
        Settings::deserialize(toml::Value::Table(t))
            .map_err(|e| usage(format!("{}: {what}: {e}", path.display())))
    };
    let mut section = Settings::default();
    for name in SECTIONS {
        match table.remove(name) {
            Some(toml::Value::Table(t)) => {
                let s = parse(t, &format!("[{name}]"))?;
                if name == command {
                    section = s;
                }
            }
            Some(_) => return Err(usage(format!("{}: `{name}` must be a table", path.display()))),
            None => {}
        }
    }
    Ok(section.over(parse(table, "top level")?))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let (name, flags) = match cli.command {
        Command::BuildVocab(a) => {
            let mut s = Settings::default().with_corpus(a.corpus);
            s.topk = a.policy.topk;
            s.user_threshold = a.policy.user_threshold;
            s.out = a.out;
            ("build-vocab", s)
        }
        Command::Train(a) => {
            let mut s = Settings::default().with_corpus(a.corpus).with_ngram(a.ngram);
            s.vocab = a.vocab;
            s.out = a.out;
            ("train", s)
        }
        Command::Analyze(a) => {
            let mut s = Settings::default()
                .with_corpus(a.corpus)
                .with_ngram(a.ngram)
                .with_source(a.source)
                .with_pipeline(a.pipeline);
            s.vocab = a.vocab;
            s.k = a.k;
            s.min_run_len = a.min_run_len;
            s.confidence_threshold = a.confidence_threshold;
            s.count_unk_targets = Settings::flag(a.count_unk_targets);
            s.redact = Settings::flag(a.redact);
            s.filter = a.filter;
            s.public_model = a.public_model;
            s.flag_threshold = a.flag_threshold;
            s.format = a.format;
            s.out = a.out;
            s.summary = a.summary;
            ("analyze", s)
        }
        Command::Epsilon(a) => {
            let mut s = Settings::default()
                .with_corpus(a.corpus)
                .with_ngram(a.ngram)
                .with_source(a.source)
                .with_pipeline(a.pipeline);
            s.report = a.report;
            s.format = a.format;
            s.vocab = a.vocab;
            s.public_model = a.public.public_model;
            s.public_adapter = a.public.public_adapter;
            s.leave_out = Settings::flag(a.public.leave_out);
            s.out = a.out;
            ("epsilon", s)
        }
    };
    let mut flags = flags;
    if flags.workers.is_none() {
        flags.workers = env_workers()?;
    }
    let settings = match &cli.config {
        Some(path) => {
            let config = load_config(path, name)?.yield_groups_to(&flags);
            flags.over(config)
        }
        None => flags,
    };
    match name {
        "build-vocab" => cmd_build_vocab(settings),
        "train" => cmd_train(settings),
        "analyze" => cmd_analyze(settings),
        _ => cmd_epsilon(settings),
    }
}

// ---------------------------------------------------------------------------
// shared helpers

fn read_corpus(s: &Settings) -> CliResult<Corpus> {
    let path = Settings::require(&s.corpus, "corpus")?;
    let f = File::open(path).map_err(|e| file_err(path, e))?;
    let ingested = ingest(BufReader::new(f)).map_err(|e| match e {
        tabaudit::Error::Io(io) => file_err(path, io),
        other => Failure::Runtime(other),
    })?;
    if ingested.dropped_empty > 0 {
        eprintln!("dropped {} empty records", ingested.dropped_empty);
    }
    if Settings::set(s.dedup) {
        let (corpus, removed) = ingested.corpus.dedup_sentences();
        eprintln!("removed {removed} duplicate sentences");
        Ok(corpus)
    } else {
        Ok(ingested.corpus)
    }
}

fn read_vocab(s: &Settings) -> CliResult<Arc<Vocabulary>> {
    let path = Settings::require(&s.vocab, "vocab")?;
    let f = File::open(path).map_err(|e| file_err(path, e))?;
    Ok(Arc::new(Vocabulary::read_from(BufReader::new(f))?))
}

fn read_encoded(s: &Settings) -> CliResult<EncodedCorpus> {
    let vocab = read_vocab(s)?;
    Ok(encode(&read_corpus(s)?, vocab))
}

fn ngram_params(s: &Settings) -> (usize, Vec<f64>) {
    let order = s.order.unwrap_or(DEFAULT_ORDER);
    let lambdas = match &s.lambdas {
        Some(l) => l.clone(),
        None if order == DEFAULT_ORDER => DEFAULT_LAMBDAS.to_vec(),
        // Uniform weights for other orders.
        None => vec![1.0 / (order + 1) as f64; order + 1],
    };
    (order, lambdas)
}

fn model_source(s: &Settings) -> CliResult<()> {
    let n = usize::from(s.model.is_some())
        + usize::from(s.adapter.is_some())
        + usize::from(Settings::set(s.train_ngram));
    match n {
        1 => Ok(()),
        0 => Err(usage("one of --model, --adapter or --train-ngram is required")),
        _ => Err(usage("--model, --adapter and --train-ngram are mutually exclusive")),
    }
}

/// Loads the private model. `corpus` is only needed for `--train-ngram`.
fn load_model(s: &Settings, corpus: Option<&EncodedCorpus>) -> CliResult<Box<dyn LanguageModel>> {
    if let Some(path) = &s.model {
        return Ok(Box::new(StoredModel::load_path(path)?));
    }
    if let Some(cmd) = &s.adapter {
        return Ok(Box::new(AdapterModel::spawn(cmd)?));
    }
    let corpus = corpus.ok_or_else(|| usage("--train-ngram needs --corpus"))?;
    let (order, lambdas) = ngram_params(s);
    Ok(Box::new(train_ngram(corpus, order, &lambdas)?))
}

fn env_workers() -> CliResult<Option<usize>> {
    let env = std::env::var(WORKERS_ENV).ok();
    match env.as_deref().map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| usage(format!("{WORKERS_ENV} must be a positive integer"))),
    }
}

fn executor(s: &Settings) -> CliResult<(Executor, usize, usize)> {
    let workers = s
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(usage("--workers must be >= 1"));
    }
    let partitions = s.partitions.unwrap_or(workers);
    let batch = s.batch_size.unwrap_or(DEFAULT_BATCH_SIZE);
    if partitions == 0 || batch == 0 {
        return Err(usage("--partitions and --batch-size must be >= 1"));
    }
    Ok((Executor::new(workers)?, partitions, batch))
}

/// Buffered writer on `path`, or standard output.
fn sink(path: Option<&PathBuf>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| file_err(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json(path: Option<&PathBuf>, doc: &serde_json::Value) -> CliResult<()> {
    let mut w = sink(path)?;
    let mut text = serde_json::to_string_pretty(doc).map_err(tabaudit::Error::from)?;
    text.push('\n');
    w.write_all(text.as_bytes()).map_err(tabaudit::Error::from)?;
    w.flush().map_err(tabaudit::Error::from)?;
    Ok(())
}

/// Stats go to stderr when the main output occupies stdout.
macro_rules! status {
    ($to_stdout:expr, $($arg:tt)*) => {
        if $to_stdout { println!($($arg)*) } else { eprintln!($($arg)*) }
    };
}

// ---------------------------------------------------------------------------
// commands

fn cmd_build_vocab(s: Settings) -> CliResult<()> {
    let out = Settings::require(&s.out, "out")?.clone();
    let policy = match (s.topk, s.user_threshold) {
        (Some(_), Some(_)) => {
            return Err(usage("--topk and --user-threshold are mutually exclusive"))
        }
        (None, None) => return Err(usage("one of --topk or --user-threshold is required")),
        (topk, threshold) => (topk, threshold),
    };
    let corpus = read_corpus(&s)?;
    let vocab = match policy {
        (Some(k), _) => build_vocab_topk(&corpus, k)?,
        (_, Some(m)) => build_vocab_user_threshold(&corpus, m)?,
        (None, None) => unreachable!("policy checked above"),
    };
    let f = File::create(&out).map_err(|e| file_err(&out, e))?;
    let mut w = BufWriter::new(f);
    vocab.write_to(&mut w)?;
    w.flush().map_err(|e| file_err(&out, e))?;
    let encoded = encode(&corpus, Arc::new(vocab));
    println!("vocabulary size: {}", encoded.vocab().size());
    println!("oov rate: {:.6}", encoded.oov_rate());
    Ok(())
}

fn cmd_train(s: Settings) -> CliResult<()> {
    let out = Settings::require(&s.out, "out")?.clone();
    let corpus = read_encoded(&s)?;
    let (order, lambdas) = ngram_params(&s);
    let model = train_ngram(&corpus, order, &lambdas)?;
    StoredModel::from(model).save_path(&out)?;
    println!(
        "trained order-{order} model on {} documents ({} tokens, vocabulary {})",
        corpus.len(),
        corpus.corpus().token_count(),
        corpus.vocab().size()
    );
    Ok(())
}

fn extraction_config(s: &Settings) -> ExtractionConfig {
    let d = ExtractionConfig::default();
    ExtractionConfig {
        k: s.k.unwrap_or(d.k),
        min_run_len: s.min_run_len.unwrap_or(d.min_run_len),
        confidence_threshold: s.confidence_threshold.or(d.confidence_threshold),
        count_unk_targets: Settings::set(s.count_unk_targets),
    }
}

fn cmd_analyze(s: Settings) -> CliResult<()> {
    model_source(&s)?;
    let config = extraction_config(&s);
    config.validate().map_err(|e| usage(e.to_string()))?;
    let (exec, partitions, batch) = executor(&s)?;
    let corpus = read_encoded(&s)?;
    let model = load_model(&s, Some(&corpus))?;

    let plan = PartitionPlan::contiguous(corpus.len(), partitions, batch)?;
    let TaskOutput::Runs(runs) =
        exec.run_parallel(&model, &corpus, Task::Extraction(&config), &plan)?
    else {
        unreachable!("extraction yields runs")
    };
    let groups = aggregate_runs(&runs);
    let patterns: Vec<Vec<u32>> = groups.iter().map(|g| g.tokens.clone()).collect();
    let TaskOutput::Counts(counts) =
        exec.run_parallel(&model, &corpus, Task::Counting(&patterns), &plan)?
    else {
        unreachable!("counting yields counts")
    };
    let mut report = assemble_report(groups, counts, corpus.vocab(), false);
    report.config = Some(config);

    if let Some(path) = &s.public_model {
        let public = StoredModel::load_path(path)?;
        report = annotate_public_comparison(
            &report,
            corpus.vocab(),
            &public,
            s.flag_threshold.unwrap_or(0.0),
        )?;
    }
    let unique = filter_unique(&report).rows.len();
    let all_rows = report.rows.len();
    let mut out = match s.filter.unwrap_or(RowFilter::None) {
        RowFilter::None => report.clone(),
        RowFilter::Unique => filter_unique(&report),
        RowFilter::Singleton => filter_singleton(&report),
    };
    if Settings::set(s.redact) {
        out = out.redact();
    }

    let format = s.format.unwrap_or(ReportFormat::Csv);
    let mut w = sink(s.out.as_ref())?;
    export(&out, format, &mut w)?;
    w.flush().map_err(tabaudit::Error::from)?;
    drop(w);

    let to_stdout = s.out.is_some();
    status!(to_stdout, "extracted runs |S|: {}", report.run_count());
    status!(to_stdout, "distinct sequences: {all_rows}");
    status!(to_stdout, "unique sequences |S_uniq|: {unique}");
    if out.rows.len() != all_rows {
        status!(to_stdout, "rows written: {}", out.rows.len());
    }
    if let Some(path) = &s.summary {
        let doc = json!({
            "tool_version": TOOL_VERSION,
            "runs": report.run_count(),
            "run_tokens": runs.token_count(),
            "rows": all_rows,
            "unique_sequences": unique,
            "rows_written": out.rows.len(),
            "filter": format!("{:?}", s.filter.unwrap_or(RowFilter::None)).to_lowercase(),
            "redacted": out.redacted,
            "format": format,
            "config": out.config,
            "documents": corpus.len(),
            "tokens": corpus.corpus().token_count(),
            "vocab_size": corpus.vocab().size(),
        });
        write_json(Some(path), &doc)?;
    }
    Ok(())
}

fn read_report(s: &Settings) -> CliResult<LeakageReport> {
    let path = Settings::require(&s.report, "report")?;
    let format = match s.format {
        Some(f) => f,
        None => match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            Some("jsonl") | Some("json") => ReportFormat::Jsonl,
            _ => return Err(usage("cannot infer report format; pass --format")),
        },
    };
    let f = File::open(path).map_err(|e| file_err(path, e))?;
    Ok(import(format, BufReader::new(f))?)
}

fn score(
    exec: &Executor,
    model: &dyn LanguageModel,
    corpus: &EncodedCorpus,
    items: &[ScoreItem],
    partitions: usize,
    batch: usize,
) -> CliResult<Vec<f64>> {
    let plan = PartitionPlan::contiguous(items.len(), partitions, batch)?;
    match exec.run_parallel(model, corpus, Task::Scoring(items), &plan)? {
        TaskOutput::Scores(v) => Ok(v.into_iter().map(|p| p.value).collect()),
        _ => unreachable!("scoring yields scores"),
    }
}

fn cmd_epsilon(s: Settings) -> CliResult<()> {
    model_source(&s)?;
    let publics = usize::from(s.public_model.is_some())
        + usize::from(s.public_adapter.is_some())
        + usize::from(Settings::set(s.leave_out));
    if publics != 1 {
        return Err(usage(
            "exactly one of --public-model, --public-adapter or --leave-out is required",
        ));
    }
    let (exec, partitions, batch) = executor(&s)?;
    let report = filter_unique(&read_report(&s)?);
    let vocab = read_vocab(&s)?;
    let needs_corpus = Settings::set(s.leave_out) || Settings::set(s.train_ngram);
    let corpus = if needs_corpus {
        encode(&read_corpus(&s)?, vocab.clone())
    } else {
        EncodedCorpus::new(Corpus::default(), vocab.clone())?
    };

    let result = if report.rows.is_empty() {
        epsilon_from_perplexities(std::iter::empty::<(String, f64, f64)>())
    } else {
        let items = epsilon_items(&report, &vocab)?;
        let private = load_model(&s, Some(&corpus))?;
        let public: Box<dyn LanguageModel> = if let Some(p) = &s.public_model {
            Box::new(StoredModel::load_path(p)?)
        } else if let Some(cmd) = &s.public_adapter {
            Box::new(AdapterModel::spawn(cmd)?)
        } else {
            let owners = owner_users(&report, &corpus)?;
            eprintln!("leaving out {} owner users", owners.len());
            let (order, lambdas) = match (&s.model, s.order, &s.lambdas) {
                // Mirror a stored n-gram model unless told otherwise.
                (Some(path), None, None) => match StoredModel::load_path(path)? {
                    StoredModel::Ngram(m) => (m.order(), m.lambdas().to_vec()),
                    _ => ngram_params(&s),
                },
                _ => ngram_params(&s),
            };
            Box::new(tabaudit::metrics::leave_out_public_model(
                &corpus,
                &owners,
                |c| train_ngram(c, order, &lambdas),
            )?)
        };
        if private.vocab_size() != vocab.size() || public.vocab_size() != vocab.size() {
            return Err(tabaudit::Error::VocabMismatch {
                corpus: vocab.size(),
                model: if private.vocab_size() != vocab.size() {
                    private.vocab_size()
                } else {
                    public.vocab_size()
                },
            }
            .into());
        }
        let pp_lm = score(&exec, private.as_ref(), &corpus, &items, partitions, batch)?;
        let pp_public = score(&exec, public.as_ref(), &corpus, &items, partitions, batch)?;
        epsilon_from_perplexities(
            items
                .iter()
                .zip(pp_lm.into_iter().zip(pp_public))
                .map(|(item, (a, b))| (item.label.clone(), a, b)),
        )
    };

    write_json(s.out.as_ref(), &result.to_document())?;
    let to_stdout = s.out.is_some();
    match result.epsilon_l {
        Some(e) => status!(to_stdout, "epsilon_l: {e:.2}"),
        None => status!(to_stdout, "epsilon_l: none"),
    }
    Ok(())
}
