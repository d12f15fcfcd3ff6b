//! Perplexity, the worst-case leakage epsilon against a public model, and
//! the leave-out protocol for building that public model.
//!
//! For a unique sequence `s` with training context `c`,
//! `ratio(s) = ln(PP_public(s | c) / PP_lm(s | c))`, and the leakage
//! epsilon is the maximum ratio over all unique sequences. A large value
//! means the sequence is easy for the audited model and surprising to a
//! model that never saw its owner's data.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{EncodedCorpus, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::lm::{sequence_log_prob, LanguageModel};
use crate::stats::{LeakageReport, PatternCounter, PublicComparison};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityValue {
    pub value: f64,
    pub n_tokens: usize,
}

/// `exp(-mean(log_probs))`. Callers guarantee a non-empty slice.
pub fn perplexity_from_log_probs(log_probs: &[f64]) -> PerplexityValue {
    debug_assert!(!log_probs.is_empty());
    let n = log_probs.len();
    PerplexityValue {
        value: (-log_probs.iter().sum::<f64>() / n as f64).exp(),
        n_tokens: n,
    }
}

/// Perplexity of `sequence` following `context`.
pub fn perplexity<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    sequence: &[TokenId],
) -> Result<PerplexityValue> {
    if sequence.is_empty() {
        return Err(Error::InvalidArgument(
            "perplexity of an empty sequence is undefined".into(),
        ));
    }
    Ok(perplexity_from_log_probs(&sequence_log_prob(
        model, context, sequence,
    )?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEntry {
    pub sequence: String,
    pub pp_lm: f64,
    pub pp_public: f64,
    pub log_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonResult {
    pub per_sequence: Vec<EpsilonEntry>,
    /// Maximum log-ratio; `None` when there were no sequences.
    pub epsilon_l: Option<f64>,
}

impl EpsilonResult {
    /// Structured output document: full-precision values, two-decimal
    /// display strings, and `"-"` for an absent epsilon.
    pub fn to_document(&self) -> Value {
        let rows: Vec<Value> = self
            .per_sequence
            .iter()
            .map(|e| {
                json!({
                    "sequence": e.sequence,
                    "pp_lm": e.pp_lm,
                    "pp_public": e.pp_public,
                    "log_ratio": e.log_ratio,
                    "display": {
                        "pp_lm": format!("{:.2}", e.pp_lm),
                        "pp_public": format!("{:.2}", e.pp_public),
                        "log_ratio": format!("{:.2}", e.log_ratio),
                    },
                })
            })
            .collect();
        json!({
            "tool_version": crate::TOOL_VERSION,
            "per_sequence": rows,
            "epsilon_l": self.epsilon_l,
            "epsilon_l_display": self.epsilon_display(),
        })
    }

    pub fn epsilon_display(&self) -> String {
        self.epsilon_l
            .map_or_else(|| "-".to_string(), |e| format!("{e:.2}"))
    }
}

impl fmt::Display for EpsilonResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<40} {:>8} {:>10} {:>9}", "sequence", "PP_lm", "PP_public", "log ratio")?;
        for e in &self.per_sequence {
            writeln!(
                f,
                "{:<40} {:>8.2} {:>10.2} {:>9.2}",
                e.sequence, e.pp_lm, e.pp_public, e.log_ratio
            )?;
        }
        write!(f, "epsilon_l = {}", self.epsilon_display())
    }
}

/// Builds the result from `(sequence, pp_lm, pp_public)` triples.
pub fn epsilon_from_perplexities<I, S>(pairs: I) -> EpsilonResult
where
    I: IntoIterator<Item = (S, f64, f64)>,
    S: Into<String>,
{
    let per_sequence: Vec<EpsilonEntry> = pairs
        .into_iter()
        .map(|(s, pp_lm, pp_public)| EpsilonEntry {
            sequence: s.into(),
            pp_lm,
            pp_public,
            log_ratio: (pp_public / pp_lm).ln(),
        })
        .collect();
    let epsilon_l = per_sequence
        .iter()
        .map(|e| e.log_ratio)
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));
    EpsilonResult {
        per_sequence,
        epsilon_l,
    }
}

/// One sequence to score under both models.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreItem {
    pub label: String,
    pub context: Vec<TokenId>,
    pub sequence: Vec<TokenId>,
}

/// One item per report row: its sequence and first context, re-encoded
/// through `vocab`. Redacted rows cannot be scored.
pub fn epsilon_items(report: &LeakageReport, vocab: &Vocabulary) -> Result<Vec<ScoreItem>> {
    report
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let redacted = || Error::Report {
                row: i + 1,
                message: "redacted rows carry no tokens to score".into(),
            };
            let sequence = row.sequence.encode(vocab).ok_or_else(redacted)?;
            let context = row
                .contexts
                .first()
                .and_then(|c| c.encode(vocab))
                .ok_or_else(redacted)?;
            Ok(ScoreItem {
                label: row.sequence.tokens().unwrap_or_default().join(" "),
                context,
                sequence,
            })
        })
        .collect()
}

/// Sequential leakage epsilon over `items`.
pub fn leakage_epsilon<P, Q>(items: &[ScoreItem], private: &P, public: &Q) -> Result<EpsilonResult>
where
    P: LanguageModel + ?Sized,
    Q: LanguageModel + ?Sized,
{
    if private.vocab_size() != public.vocab_size() {
        return Err(Error::VocabMismatch {
            corpus: private.vocab_size(),
            model: public.vocab_size(),
        });
    }
    let mut triples = Vec::with_capacity(items.len());
    for item in items {
        let lm = perplexity(private, &item.context, &item.sequence)?;
        let pb = perplexity(public, &item.context, &item.sequence)?;
        triples.push((item.label.clone(), lm.value, pb.value));
    }
    Ok(epsilon_from_perplexities(triples))
}

/// Adds per-context public perplexities and log-ratios to every row. A row
/// is flagged plausibly public when all its log-ratios are at or below
/// `flag_threshold`.
pub fn annotate_public_comparison<Q: LanguageModel + ?Sized>(
    report: &LeakageReport,
    vocab: &Vocabulary,
    public: &Q,
    flag_threshold: f64,
) -> Result<LeakageReport> {
    if public.vocab_size() != vocab.size() {
        return Err(Error::VocabMismatch {
            corpus: vocab.size(),
            model: public.vocab_size(),
        });
    }
    let mut out = report.clone();
    for (i, row) in out.rows.iter_mut().enumerate() {
        let redacted = || Error::Report {
            row: i + 1,
            message: "redacted rows carry no tokens to score".into(),
        };
        let sequence = row.sequence.encode(vocab).ok_or_else(redacted)?;
        let mut pp_public = Vec::with_capacity(row.contexts.len());
        let mut log_ratio = Vec::with_capacity(row.contexts.len());
        for (ctx, &pp_lm) in row.contexts.iter().zip(&row.perplexities) {
            let ctx = ctx.encode(vocab).ok_or_else(redacted)?;
            let pp = perplexity(public, &ctx, &sequence)?.value;
            pp_public.push(pp);
            log_ratio.push((pp / pp_lm).ln());
        }
        let plausibly_public = log_ratio.iter().all(|&r| r <= flag_threshold);
        row.public = Some(PublicComparison {
            pp_public,
            log_ratio,
            plausibly_public,
        });
    }
    Ok(out)
}

/// Users owning the rows of a unique-filtered report: for each row, the one
/// user whose data contains its sequence. Sorted and deduplicated.
pub fn owner_users(report: &LeakageReport, corpus: &EncodedCorpus) -> Result<Vec<String>> {
    let mut patterns = Vec::with_capacity(report.rows.len());
    for (i, row) in report.rows.iter().enumerate() {
        let seq = row.sequence.encode(corpus.vocab()).ok_or_else(|| Error::UnknownOwner {
            row: i + 1,
            reason: "sequence is redacted".into(),
        })?;
        patterns.push(seq);
    }
    let counter = PatternCounter::new(&patterns, corpus);
    let counts = counter.count(corpus.documents());
    let users: Vec<&str> = corpus.corpus().users().collect();
    let mut owners = Vec::new();
    for (i, canon) in counter.canonical().iter().enumerate() {
        match counts.users[*canon].as_slice() {
            [only] => owners.push(users[*only as usize].to_string()),
            found => {
                return Err(Error::UnknownOwner {
                    row: i + 1,
                    reason: format!("sequence found in {} users' data, expected 1", found.len()),
                })
            }
        }
    }
    owners.sort();
    owners.dedup();
    Ok(owners)
}

/// Trains a public model on the corpus with every owner's documents removed.
pub fn leave_out_public_model<M, F, S>(
    corpus: &EncodedCorpus,
    owner_users: &[S],
    train: F,
) -> Result<M>
where
    F: FnOnce(&EncodedCorpus) -> Result<M>,
    S: AsRef<str>,
{
    let remaining = corpus.exclude_users(owner_users);
    if remaining.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    train(&remaining)
}
