//! Collection of correct model predictions over the training data.
//!
//! Every document is scanned left to right. Position `t ≥ 1` is *correct*
//! when its true token is among the model's top-k predictions given tokens
//! `[0, t)`, is not `<unk>` (unless requested), and the model is confident
//! enough to answer at all. Maximal blocks of consecutive correct positions
//! are the runs; the collection of all runs is a multiset.

use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedCorpus, EncodedDocument, TokenId};
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, Prediction, Query};

/// Default number of per-position queries grouped into one model call.
pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    /// Top-k width; 1 is the tab attack.
    pub k: usize,
    /// Runs shorter than this are dropped after maximality is settled.
    pub min_run_len: usize,
    /// Per-token perplexity cap `1 / p(top-1)`; above it the model answers
    /// nothing at that position.
    pub confidence_threshold: Option<f64>,
    pub count_unk_targets: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            k: 1,
            min_run_len: 1,
            confidence_threshold: None,
            count_unk_targets: false,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if self.min_run_len == 0 {
            return Err(Error::InvalidArgument("min_run_len must be >= 1".into()));
        }
        if let Some(t) = self.confidence_threshold {
            if !(t > 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "confidence threshold must be > 1, got {t}"
                )));
            }
        }
        Ok(())
    }

    /// Whether a prediction at a position with true token `target` counts.
    pub fn is_correct(&self, prediction: &Prediction, target: TokenId, unk_id: TokenId) -> bool {
        if target == unk_id && !self.count_unk_targets {
            return false;
        }
        if let Some(cap) = self.confidence_threshold {
            if !(1.0 / prediction.top1_prob <= cap) {
                return false;
            }
        }
        prediction.top_k.contains(&target)
    }
}

/// One maximal block of consecutively correct predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub user_id: String,
    pub doc_id: String,
    /// Index of the first run token; always ≥ 1.
    pub start_pos: usize,
    pub tokens: Vec<TokenId>,
    /// The document prefix `[0, start_pos)`.
    pub context_tokens: Vec<TokenId>,
    /// Natural-log probability of each run token under its true context.
    pub token_log_probs: Vec<f64>,
}

impl Run {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn context_len(&self) -> usize {
        self.start_pos
    }

    /// `exp` of the negative mean token log-probability.
    pub fn perplexity(&self) -> f64 {
        let n = self.token_log_probs.len() as f64;
        (-self.token_log_probs.iter().sum::<f64>() / n).exp()
    }
}

/// Runs ordered by (user_id, doc_id, start_pos). Equal token contents may
/// repeat.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMultiset {
    runs: Vec<Run>,
}

impl RunMultiset {
    /// Sorts into canonical order.
    pub fn from_runs(mut runs: Vec<Run>) -> Self {
        runs.sort_by(|a, b| {
            (&a.user_id, &a.doc_id, a.start_pos).cmp(&(&b.user_id, &b.doc_id, b.start_pos))
        });
        Self { runs }
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn into_runs(self) -> Vec<Run> {
        self.runs
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    /// Number of correctly predicted tokens across all runs.
    pub fn token_count(&self) -> usize {
        self.runs.iter().map(Run::len).sum()
    }
}

pub(crate) fn check_vocab<M: LanguageModel + ?Sized>(
    model: &M,
    corpus: &EncodedCorpus,
) -> Result<()> {
    if model.vocab_size() != corpus.vocab().size() {
        return Err(Error::VocabMismatch {
            corpus: corpus.vocab().size(),
            model: model.vocab_size(),
        });
    }
    Ok(())
}

/// Labels every scored position (1..len) of each document in `docs`,
/// querying the model in batches of at most `batch_size`. Batches may span
/// documents.
pub fn label_positions<M: LanguageModel + ?Sized>(
    model: &M,
    docs: &[EncodedDocument],
    config: &ExtractionConfig,
    unk_id: TokenId,
    batch_size: usize,
) -> Result<Vec<Vec<Option<f64>>>> {
    let batch_size = batch_size.max(1);
    let queries: Vec<(usize, usize)> = docs
        .iter()
        .enumerate()
        .flat_map(|(d, doc)| (1..doc.tokens.len()).map(move |t| (d, t)))
        .collect();

    // labels[d][t - 1] = Some(log p) when position t is correct
    let mut labels: Vec<Vec<Option<f64>>> = docs
        .iter()
        .map(|d| vec![None; d.tokens.len().saturating_sub(1)])
        .collect();
    for chunk in queries.chunks(batch_size) {
        let batch: Vec<Query<'_>> = chunk
            .iter()
            .map(|&(d, t)| Query {
                context: &docs[d].tokens[..t],
                target: docs[d].tokens[t],
            })
            .collect();
        let preds = model.predict_batch(&batch, config.k)?;
        if preds.len() != batch.len() {
            return Err(Error::InvalidModel(format!(
                "model answered {} of {} queries",
                preds.len(),
                batch.len()
            )));
        }
        for (&(d, t), (q, p)) in chunk.iter().zip(batch.iter().zip(&preds)) {
            if config.is_correct(p, q.target, unk_id) {
                labels[d][t - 1] = Some(p.target_log_prob);
            }
        }
    }
    Ok(labels)
}

/// Groups labelled positions into maximal runs. A run still open at the end
/// of the document is kept.
fn collect_runs(
    doc: &EncodedDocument,
    labels: &[Option<f64>],
    min_run_len: usize,
    out: &mut Vec<Run>,
) {
    let mut t = 1;
    while t < doc.tokens.len() {
        if labels[t - 1].is_none() {
            t += 1;
            continue;
        }
        let start = t;
        let mut lps = Vec::new();
        while t < doc.tokens.len() {
            match labels[t - 1] {
                Some(lp) => lps.push(lp),
                None => break,
            }
            t += 1;
        }
        if lps.len() >= min_run_len {
            out.push(Run {
                user_id: doc.user_id.clone(),
                doc_id: doc.doc_id.clone(),
                start_pos: start,
                tokens: doc.tokens[start..t].to_vec(),
                context_tokens: doc.tokens[..start].to_vec(),
                token_log_probs: lps,
            });
        }
    }
}

/// Runs from `docs`, unsorted, in document order.
pub fn scan_documents<M: LanguageModel + ?Sized>(
    model: &M,
    docs: &[EncodedDocument],
    config: &ExtractionConfig,
    unk_id: TokenId,
    batch_size: usize,
) -> Result<Vec<Run>> {
    let labels = label_positions(model, docs, config, unk_id, batch_size)?;
    let mut runs = Vec::new();
    for (doc, labels) in docs.iter().zip(&labels) {
        collect_runs(doc, labels, config.min_run_len, &mut runs);
    }
    Ok(runs)
}

/// Scans every document of `corpus` and returns the run multiset.
pub fn extract_runs<M: LanguageModel + ?Sized>(
    model: &M,
    corpus: &EncodedCorpus,
    config: &ExtractionConfig,
) -> Result<RunMultiset> {
    config.validate()?;
    check_vocab(model, corpus)?;
    let runs = scan_documents(
        model,
        corpus.documents(),
        config,
        corpus.vocab().unk_id(),
        DEFAULT_BATCH_SIZE,
    )?;
    Ok(RunMultiset::from_runs(runs))
}
