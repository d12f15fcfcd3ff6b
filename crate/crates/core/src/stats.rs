//! The leakage report: one row per distinct correctly predicted sequence,
//! with its counts in the run multiset and in the training data, the
//! contexts it was produced from and the model's perplexity on each.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::corpus::{EncodedCorpus, EncodedDocument, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::extractor::{check_vocab, ExtractionConfig, RunMultiset};
use crate::lm::LanguageModel;
use crate::matcher::TokenMatcher;
use crate::metrics::perplexity_from_log_probs;

/// Runs sharing one token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct RunGroup {
    pub tokens: Vec<TokenId>,
    pub total_in_s: usize,
    pub user_in_s: usize,
    /// One entry per run, in run-multiset order.
    pub contexts: Vec<Vec<TokenId>>,
    pub log_probs: Vec<Vec<f64>>,
    pub users: Vec<String>,
}

/// Groups runs by exact token content, in order of first appearance.
pub fn aggregate_runs(runs: &RunMultiset) -> Vec<RunGroup> {
    let mut index: HashMap<&[TokenId], usize> = HashMap::new();
    let mut groups: Vec<RunGroup> = Vec::new();
    let mut owners: Vec<HashSet<&str>> = Vec::new();
    for run in runs.runs() {
        let i = *index.entry(run.tokens.as_slice()).or_insert_with(|| {
            groups.push(RunGroup {
                tokens: run.tokens.clone(),
                total_in_s: 0,
                user_in_s: 0,
                contexts: Vec::new(),
                log_probs: Vec::new(),
                users: Vec::new(),
            });
            owners.push(HashSet::new());
            groups.len() - 1
        });
        let g = &mut groups[i];
        g.total_in_s += 1;
        g.contexts.push(run.context_tokens.clone());
        g.log_probs.push(run.token_log_probs.clone());
        g.users.push(run.user_id.clone());
        owners[i].insert(run.user_id.as_str());
    }
    for (g, o) in groups.iter_mut().zip(owners) {
        g.user_in_s = o.len();
    }
    groups
}

/// Occurrences of one pattern in the training data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCount {
    pub total_in_d: usize,
    pub user_in_d: usize,
}

/// Mergeable partial counts for a set of patterns: occurrence totals and
/// the set of user ordinals containing each pattern.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OccurrenceCounts {
    pub totals: Vec<u64>,
    pub users: Vec<Vec<u32>>,
}

impl OccurrenceCounts {
    pub fn empty(patterns: usize) -> Self {
        Self {
            totals: vec![0; patterns],
            users: vec![Vec::new(); patterns],
        }
    }

    /// Adds totals and unions user sets.
    pub fn merge(mut self, other: &OccurrenceCounts) -> Self {
        for (t, o) in self.totals.iter_mut().zip(&other.totals) {
            *t += o;
        }
        for (u, o) in self.users.iter_mut().zip(&other.users) {
            u.extend_from_slice(o);
            u.sort_unstable();
            u.dedup();
        }
        self
    }

    pub fn finish(&self) -> Vec<CorpusCount> {
        self.totals
            .iter()
            .zip(&self.users)
            .map(|(&t, u)| CorpusCount {
                total_in_d: t as usize,
                user_in_d: u.len(),
            })
            .collect()
    }
}

/// Compiled pattern set plus the corpus-wide user numbering.
pub struct PatternCounter {
    matcher: TokenMatcher,
    canonical: Vec<usize>,
    user_ordinal: HashMap<String, u32>,
}

impl PatternCounter {
    pub fn new<P: AsRef<[TokenId]>>(patterns: &[P], corpus: &EncodedCorpus) -> Self {
        let (matcher, canonical) = TokenMatcher::new(patterns);
        let user_ordinal = corpus
            .corpus()
            .users()
            .enumerate()
            .map(|(i, u)| (u.to_string(), i as u32))
            .collect();
        Self {
            matcher,
            canonical,
            user_ordinal,
        }
    }

    /// Single pass of the automaton over `docs`.
    pub fn count(&self, docs: &[EncodedDocument]) -> OccurrenceCounts {
        let n = self.matcher.pattern_count();
        let mut acc = OccurrenceCounts::empty(n);
        for doc in docs {
            let Some(&user) = self.user_ordinal.get(&doc.user_id) else {
                continue;
            };
            self.matcher.for_each_match(&doc.tokens, |p, _| {
                acc.totals[p] += 1;
                if acc.users[p].last() != Some(&user) {
                    acc.users[p].push(user);
                }
            });
        }
        for u in &mut acc.users {
            u.sort_unstable();
            u.dedup();
        }
        acc
    }

    /// For each input pattern, the index its counts are reported under.
    pub fn canonical(&self) -> &[usize] {
        &self.canonical
    }

    /// Copies canonical counts onto duplicate patterns.
    pub fn resolve(&self, counts: Vec<CorpusCount>) -> Vec<CorpusCount> {
        self.canonical.iter().map(|&c| counts[c]).collect()
    }
}

/// Per-pattern `(total_in_D, user_in_D)`: every contiguous, possibly
/// overlapping occurrence inside a document, and the number of users with
/// at least one. Patterns never match across document boundaries; empty
/// patterns count as absent.
pub fn count_in_corpus<P: AsRef<[TokenId]>>(
    sequences: &[P],
    corpus: &EncodedCorpus,
) -> Vec<CorpusCount> {
    let counter = PatternCounter::new(sequences, corpus);
    let counts = counter.count(corpus.documents()).finish();
    counter.resolve(counts)
}

/// A token sequence, or only its length in a redacted report.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Seq {
    Tokens(Vec<String>),
    Length(usize),
}

impl Seq {
    pub fn len(&self) -> usize {
        match self {
            Seq::Tokens(t) => t.len(),
            Seq::Length(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> Option<&[String]> {
        match self {
            Seq::Tokens(t) => Some(t),
            Seq::Length(_) => None,
        }
    }

    fn redact(&mut self) {
        *self = Seq::Length(self.len());
    }

    fn to_json(&self) -> Value {
        match self {
            Seq::Tokens(t) => Value::String(t.join(" ")),
            Seq::Length(n) => json!(n),
        }
    }

    fn from_json(v: &Value) -> Option<Seq> {
        match v {
            Value::String(s) => Some(Seq::Tokens(split_tokens(s))),
            Value::Number(n) => n.as_u64().map(|n| Seq::Length(n as usize)),
            _ => None,
        }
    }

    /// Re-encodes through `vocab`; `None` when redacted.
    pub fn encode(&self, vocab: &Vocabulary) -> Option<Vec<TokenId>> {
        self.tokens()
            .map(|t| t.iter().map(|s| vocab.id_of(s)).collect())
    }
}

fn split_tokens(s: &str) -> Vec<String> {
    s.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

/// Comparison against a public model, aligned with the row's contexts.
#[derive(Clone, Debug, PartialEq)]
pub struct PublicComparison {
    pub pp_public: Vec<f64>,
    /// `ln(pp_public / pp_lm)` per context.
    pub log_ratio: Vec<f64>,
    /// Every context's log-ratio is at or below the flag threshold.
    pub plausibly_public: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub sequence: Seq,
    pub total_in_s: usize,
    pub user_in_s: usize,
    pub total_in_d: usize,
    pub user_in_d: usize,
    pub contexts: Vec<Seq>,
    pub perplexities: Vec<f64>,
    pub public: Option<PublicComparison>,
}

impl ReportRow {
    /// Checks the count relations every row must satisfy.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let ok = 1 <= self.user_in_s
            && self.user_in_s <= self.total_in_s
            && 1 <= self.user_in_d
            && self.user_in_d <= self.total_in_d
            && self.user_in_s <= self.user_in_d
            && self.total_in_s <= self.total_in_d
            && self.contexts.len() == self.total_in_s
            && self.perplexities.len() == self.total_in_s;
        if ok {
            Ok(())
        } else {
            Err(format!(
                "counts S=({}, {}) D=({}, {}) with {} contexts, {} perplexities",
                self.total_in_s,
                self.user_in_s,
                self.total_in_d,
                self.user_in_d,
                self.contexts.len(),
                self.perplexities.len()
            ))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LeakageReport {
    pub rows: Vec<ReportRow>,
    /// Extraction settings the report was built with; absent on import.
    pub config: Option<ExtractionConfig>,
    pub redacted: bool,
}

impl LeakageReport {
    /// Total number of runs behind the report.
    pub fn run_count(&self) -> usize {
        self.rows.iter().map(|r| r.total_in_s).sum()
    }

    pub fn is_annotated(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.public.is_some())
    }

    /// Replaces sequences and contexts with their token lengths.
    pub fn redact(mut self) -> Self {
        for row in &mut self.rows {
            row.sequence.redact();
            for c in &mut row.contexts {
                c.redact();
            }
        }
        self.redacted = true;
        self
    }
}

/// Joins grouped runs with their training-data counts. Rows are sorted by
/// descending sequence length, then ascending sequence.
pub fn build_report<M: LanguageModel + ?Sized>(
    runs: &RunMultiset,
    corpus: &EncodedCorpus,
    model: &M,
    redact: bool,
) -> Result<LeakageReport> {
    check_vocab(model, corpus)?;
    let groups = aggregate_runs(runs);
    let patterns: Vec<&[TokenId]> = groups.iter().map(|g| g.tokens.as_slice()).collect();
    let counts = count_in_corpus(&patterns, corpus);
    Ok(assemble_report(groups, counts, corpus.vocab(), redact))
}

/// Builds the report from already computed groups and counts.
pub fn assemble_report(
    groups: Vec<RunGroup>,
    counts: Vec<CorpusCount>,
    vocab: &Vocabulary,
    redact: bool,
) -> LeakageReport {
    let mut rows: Vec<ReportRow> = groups
        .into_iter()
        .zip(counts)
        .map(|(g, c)| ReportRow {
            sequence: Seq::Tokens(vocab.decode(&g.tokens)),
            total_in_s: g.total_in_s,
            user_in_s: g.user_in_s,
            total_in_d: c.total_in_d,
            user_in_d: c.user_in_d,
            contexts: g.contexts.iter().map(|c| Seq::Tokens(vocab.decode(c))).collect(),
            perplexities: g
                .log_probs
                .iter()
                .map(|lp| perplexity_from_log_probs(lp).value)
                .collect(),
            public: None,
        })
        .collect();
    sort_rows(&mut rows);
    let report = LeakageReport {
        rows,
        config: None,
        redacted: false,
    };
    if redact {
        report.redact()
    } else {
        report
    }
}

fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(|a, b| {
        b.sequence
            .len()
            .cmp(&a.sequence.len())
            .then_with(|| a.sequence.cmp(&b.sequence))
    });
}

/// Rows whose sequence occurs in exactly one user's data.
pub fn filter_unique(report: &LeakageReport) -> LeakageReport {
    filter(report, |r| r.user_in_d == 1)
}

/// Rows whose sequence occurs exactly once in the whole training data.
pub fn filter_singleton(report: &LeakageReport) -> LeakageReport {
    filter(report, |r| r.total_in_d == 1)
}

fn filter(report: &LeakageReport, keep: impl Fn(&ReportRow) -> bool) -> LeakageReport {
    LeakageReport {
        rows: report.rows.iter().filter(|r| keep(r)).cloned().collect(),
        config: report.config.clone(),
        redacted: report.redacted,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

const CSV_COLUMNS: [&str; 7] = [
    "sequence",
    "total_in_S",
    "user_in_S",
    "total_in_D",
    "user_in_D",
    "contexts",
    "perplexities",
];
const CSV_PUBLIC_COLUMNS: [&str; 3] = ["pp_public", "log_ratio", "plausibly_public"];

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn row_error(row: usize, e: impl std::fmt::Display) -> Error {
    Error::Report {
        row,
        message: e.to_string(),
    }
}

fn seq_list(items: &[Seq]) -> String {
    let mut s = String::from("[");
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        match item {
            Seq::Tokens(t) => s.push_str(&Value::String(t.join(" ")).to_string()),
            Seq::Length(n) => {
                let _ = write!(s, "{n}");
            }
        }
    }
    s.push(']');
    s
}

fn fixed2_list(values: &[f64]) -> String {
    let items: Vec<String> = values.iter().map(|v| format!("{v:.2}")).collect();
    format!("[{}]", items.join(", "))
}

/// Writes `report` and returns the number of bytes written.
///
/// CSV columns: `sequence,total_in_S,user_in_S,total_in_D,user_in_D,contexts,perplexities`,
/// followed by `pp_public,log_ratio,plausibly_public` for annotated reports.
/// Sequences are space-joined tokens; list columns are bracketed, with
/// quoted contexts and two-decimal numbers. JSONL holds one object per row
/// with the same field names at full precision.
pub fn export<W: Write>(report: &LeakageReport, format: ReportFormat, sink: W) -> Result<u64> {
    let mut sink = CountingWriter {
        inner: sink,
        written: 0,
    };
    let annotated = report.is_annotated();
    match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(&mut sink);
            let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
            if annotated {
                header.extend(CSV_PUBLIC_COLUMNS);
            }
            w.write_record(&header).map_err(|e| row_error(0, e))?;
            for (i, row) in report.rows.iter().enumerate() {
                let mut rec = vec![
                    match &row.sequence {
                        Seq::Tokens(t) => t.join(" "),
                        Seq::Length(n) => n.to_string(),
                    },
                    row.total_in_s.to_string(),
                    row.user_in_s.to_string(),
                    row.total_in_d.to_string(),
                    row.user_in_d.to_string(),
                    seq_list(&row.contexts),
                    fixed2_list(&row.perplexities),
                ];
                if let (true, Some(p)) = (annotated, &row.public) {
                    rec.push(fixed2_list(&p.pp_public));
                    rec.push(fixed2_list(&p.log_ratio));
                    rec.push(p.plausibly_public.to_string());
                }
                w.write_record(&rec).map_err(|e| row_error(i + 1, e))?;
            }
            w.flush().map_err(|e| row_error(report.rows.len(), e))?;
        }
        ReportFormat::Jsonl => {
            for (i, row) in report.rows.iter().enumerate() {
                let mut obj = Map::new();
                obj.insert("sequence".into(), row.sequence.to_json());
                obj.insert("total_in_S".into(), json!(row.total_in_s));
                obj.insert("user_in_S".into(), json!(row.user_in_s));
                obj.insert("total_in_D".into(), json!(row.total_in_d));
                obj.insert("user_in_D".into(), json!(row.user_in_d));
                obj.insert(
                    "contexts".into(),
                    Value::Array(row.contexts.iter().map(Seq::to_json).collect()),
                );
                obj.insert("perplexities".into(), json!(row.perplexities));
                if let Some(p) = &row.public {
                    obj.insert("pp_public".into(), json!(p.pp_public));
                    obj.insert("log_ratio".into(), json!(p.log_ratio));
                    obj.insert("plausibly_public".into(), json!(p.plausibly_public));
                }
                if report.redacted {
                    obj.insert("redacted".into(), Value::Bool(true));
                }
                let line = serde_json::to_string(&Value::Object(obj))?;
                writeln!(sink, "{line}").map_err(|e| row_error(i + 1, e))?;
            }
            sink.flush().map_err(|e| row_error(report.rows.len(), e))?;
        }
    }
    Ok(sink.written)
}

fn parse_seq_list(row: usize, s: &str) -> Result<Vec<Seq>> {
    let v: Value = serde_json::from_str(s).map_err(|e| row_error(row, e))?;
    let Value::Array(items) = v else {
        return Err(row_error(row, "expected a bracketed list"));
    };
    items
        .iter()
        .map(|i| Seq::from_json(i).ok_or_else(|| row_error(row, "bad context entry")))
        .collect()
}

fn parse_f64_list(row: usize, s: &str) -> Result<Vec<f64>> {
    serde_json::from_str(s).map_err(|e| row_error(row, e))
}

fn parse_count(row: usize, s: &str) -> Result<usize> {
    s.parse().map_err(|e| row_error(row, e))
}

fn get<'a>(obj: &'a Map<String, Value>, row: usize, key: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| row_error(row, format!("missing field `{key}`")))
}

fn get_count(obj: &Map<String, Value>, row: usize, key: &str) -> Result<usize> {
    get(obj, row, key)?
        .as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| row_error(row, format!("`{key}` is not a count")))
}

fn get_f64s(obj: &Map<String, Value>, row: usize, key: &str) -> Result<Vec<f64>> {
    serde_json::from_value(get(obj, row, key)?.clone()).map_err(|e| row_error(row, e))
}

/// Reads a report written by [`export`].
pub fn import<R: BufRead>(format: ReportFormat, source: R) -> Result<LeakageReport> {
    let mut rows = Vec::new();
    let mut redacted = false;
    match format {
        ReportFormat::Csv => {
            let mut r = csv::ReaderBuilder::new().from_reader(source);
            let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
            let annotated = header.len() == CSV_COLUMNS.len() + CSV_PUBLIC_COLUMNS.len();
            let expected: Vec<&str> = if annotated {
                CSV_COLUMNS.iter().chain(&CSV_PUBLIC_COLUMNS).copied().collect()
            } else {
                CSV_COLUMNS.to_vec()
            };
            if header != expected {
                return Err(row_error(0, format!("unexpected header {header:?}")));
            }
            for (i, rec) in r.records().enumerate() {
                let n = i + 1;
                let rec = rec.map_err(|e| row_error(n, e))?;
                let contexts = parse_seq_list(n, &rec[5])?;
                let is_redacted = contexts.iter().any(|c| matches!(c, Seq::Length(_)));
                redacted |= is_redacted;
                let sequence = if is_redacted {
                    Seq::Length(parse_count(n, &rec[0])?)
                } else {
                    Seq::Tokens(split_tokens(&rec[0]))
                };
                let public = if annotated {
                    Some(PublicComparison {
                        pp_public: parse_f64_list(n, &rec[7])?,
                        log_ratio: parse_f64_list(n, &rec[8])?,
                        plausibly_public: rec[9].parse().map_err(|e| row_error(n, e))?,
                    })
                } else {
                    None
                };
                rows.push(ReportRow {
                    sequence,
                    total_in_s: parse_count(n, &rec[1])?,
                    user_in_s: parse_count(n, &rec[2])?,
                    total_in_d: parse_count(n, &rec[3])?,
                    user_in_d: parse_count(n, &rec[4])?,
                    contexts,
                    perplexities: parse_f64_list(n, &rec[6])?,
                    public,
                });
            }
        }
        ReportFormat::Jsonl => {
            for (i, line) in source.lines().enumerate() {
                let n = i + 1;
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let v: Value = serde_json::from_str(&line).map_err(|e| row_error(n, e))?;
                let Value::Object(obj) = v else {
                    return Err(row_error(n, "expected an object"));
                };
                redacted |= obj.get("redacted") == Some(&Value::Bool(true));
                let sequence = Seq::from_json(get(&obj, n, "sequence")?)
                    .ok_or_else(|| row_error(n, "bad sequence"))?;
                let contexts = match get(&obj, n, "contexts")? {
                    Value::Array(items) => items
                        .iter()
                        .map(|c| Seq::from_json(c).ok_or_else(|| row_error(n, "bad context")))
                        .collect::<Result<Vec<_>>>()?,
                    _ => return Err(row_error(n, "`contexts` is not a list")),
                };
                let public = if obj.contains_key("pp_public") {
                    Some(PublicComparison {
                        pp_public: get_f64s(&obj, n, "pp_public")?,
                        log_ratio: get_f64s(&obj, n, "log_ratio")?,
                        plausibly_public: get(&obj, n, "plausibly_public")?
                            .as_bool()
                            .ok_or_else(|| row_error(n, "`plausibly_public` is not a bool"))?,
                    })
                } else {
                    None
                };
                rows.push(ReportRow {
                    sequence,
                    total_in_s: get_count(&obj, n, "total_in_S")?,
                    user_in_s: get_count(&obj, n, "user_in_S")?,
                    total_in_d: get_count(&obj, n, "total_in_D")?,
                    user_in_d: get_count(&obj, n, "user_in_D")?,
                    contexts,
                    perplexities: get_f64s(&obj, n, "perplexities")?,
                    public,
                });
            }
        }
    }
    Ok(LeakageReport {
        rows,
        config: None,
        redacted,
    })
}
