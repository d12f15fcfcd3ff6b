//! Partitioned, batched execution on a worker pool.
//!
//! Work units (documents, or score items) are split into contiguous
//! partitions. Each worker evaluates whole partitions, grouping model
//! queries into batches, and the partial outputs are merged by partition id
//! so the result never depends on the plan, the batch size or the worker
//! count.

use std::ops::Range;

use rayon::prelude::*;

use crate::corpus::{EncodedCorpus, TokenId};
use crate::error::{Error, Result};
use crate::extractor::{check_vocab, scan_documents, ExtractionConfig, Run, RunMultiset};
use crate::lm::{LanguageModel, Query};
use crate::metrics::{perplexity_from_log_probs, PerplexityValue, ScoreItem};
use crate::stats::{CorpusCount, OccurrenceCounts, PatternCounter};

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "TABAUDIT_WORKERS";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    ranges: Vec<Range<usize>>,
    batch_size: usize,
}

impl PartitionPlan {
    /// Splits `n_units` into `n_partitions` contiguous ranges whose sizes
    /// differ by at most one. Partitions may be empty when there are fewer
    /// units than partitions.
    pub fn contiguous(n_units: usize, n_partitions: usize, batch_size: usize) -> Result<Self> {
        if n_partitions == 0 {
            return Err(Error::InvalidArgument("need at least one partition".into()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        let base = n_units / n_partitions;
        let extra = n_units % n_partitions;
        let mut ranges = Vec::with_capacity(n_partitions);
        let mut start = 0;
        for p in 0..n_partitions {
            let len = base + usize::from(p < extra);
            ranges.push(start..start + len);
            start += len;
        }
        Ok(Self { ranges, batch_size })
    }

    pub fn n_partitions(&self) -> usize {
        self.ranges.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn n_units(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    /// Partition id of every unit.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_units());
        for (p, r) in self.ranges.iter().enumerate() {
            out.extend(std::iter::repeat(p).take(r.len()));
        }
        out
    }
}

/// Worker count: `TABAUDIT_WORKERS` when set to a positive integer,
/// otherwise the available parallelism.
pub fn default_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub enum Task<'a> {
    Extraction(&'a ExtractionConfig),
    Counting(&'a [Vec<TokenId>]),
    Scoring(&'a [ScoreItem]),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Partial {
    Runs(Vec<Run>),
    Counts(OccurrenceCounts),
    Scores(Vec<PerplexityValue>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskOutput {
    Runs(RunMultiset),
    Counts(Vec<CorpusCount>),
    Scores(Vec<PerplexityValue>),
}

/// Owns the worker pool.
pub struct Executor {
    pool: rayon::ThreadPool,
    workers: usize,
}

impl Executor {
    pub fn new(workers: usize) -> Result<Self> {
        let workers = workers.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("tabaudit-worker-{i}"))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
        Ok(Self { pool, workers })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Evaluates `f` on every partition. Fails with the lowest failing
    /// partition id; no partial output escapes.
    pub fn map_partitions<T, F>(&self, plan: &PartitionPlan, f: F) -> Result<Vec<(usize, T)>>
    where
        T: Send,
        F: Fn(usize, Range<usize>) -> Result<T> + Sync,
    {
        let results: Vec<Result<T>> = self.pool.install(|| {
            plan.ranges()
                .par_iter()
                .enumerate()
                .map(|(p, r)| f(p, r.clone()))
                .collect()
        });
        results
            .into_iter()
            .enumerate()
            .map(|(p, r)| {
                r.map(|v| (p, v)).map_err(|e| Error::Partition {
                    partition: p,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// Runs `task` over `corpus` (documents) or over the score items,
    /// according to `plan`, and merges the partial outputs.
    pub fn run_parallel<M: LanguageModel + ?Sized>(
        &self,
        model: &M,
        corpus: &EncodedCorpus,
        task: Task<'_>,
        plan: &PartitionPlan,
    ) -> Result<TaskOutput> {
        let units = match &task {
            Task::Scoring(items) => items.len(),
            _ => corpus.len(),
        };
        if plan.n_units() != units {
            return Err(Error::InvalidArgument(format!(
                "plan covers {} units, task has {units}",
                plan.n_units()
            )));
        }
        let docs = corpus.documents();
        let batch = plan.batch_size();
        let partials = match task {
            Task::Extraction(config) => {
                config.validate()?;
                check_vocab(model, corpus)?;
                let unk = corpus.vocab().unk_id();
                self.map_partitions(plan, |_, r| {
                    scan_documents(model, &docs[r], config, unk, batch).map(Partial::Runs)
                })?
            }
            Task::Counting(patterns) => {
                let counter = PatternCounter::new(patterns, corpus);
                let partials = self.map_partitions(plan, |_, r| {
                    Ok(Partial::Counts(counter.count(&docs[r])))
                })?;
                return match merge(partials, plan)? {
                    TaskOutput::Counts(c) => Ok(TaskOutput::Counts(counter.resolve(c))),
                    other => Ok(other),
                };
            }
            Task::Scoring(items) => self.map_partitions(plan, |_, r| {
                score_items(model, &items[r], batch).map(Partial::Scores)
            })?,
        };
        merge(partials, plan)
    }
}

/// Perplexity of each item, querying the model in batches of `batch_size`
/// token positions.
pub fn score_items<M: LanguageModel + ?Sized>(
    model: &M,
    items: &[ScoreItem],
    batch_size: usize,
) -> Result<Vec<PerplexityValue>> {
    let mut full: Vec<Vec<TokenId>> = Vec::with_capacity(items.len());
    for item in items {
        if item.sequence.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "cannot score empty sequence {:?}",
                item.label
            )));
        }
        let mut v = item.context.clone();
        v.extend_from_slice(&item.sequence);
        full.push(v);
    }
    let positions: Vec<(usize, usize)> = items
        .iter()
        .enumerate()
        .flat_map(|(i, item)| {
            (item.context.len()..item.context.len() + item.sequence.len()).map(move |t| (i, t))
        })
        .collect();
    let mut log_probs: Vec<Vec<f64>> = items
        .iter()
        .map(|i| Vec::with_capacity(i.sequence.len()))
        .collect();
    for chunk in positions.chunks(batch_size.max(1)) {
        let queries: Vec<Query<'_>> = chunk
            .iter()
            .map(|&(i, t)| Query {
                context: &full[i][..t],
                target: full[i][t],
            })
            .collect();
        let preds = model.predict_batch(&queries, 1)?;
        for (&(i, _), p) in chunk.iter().zip(preds) {
            log_probs[i].push(p.target_log_prob);
        }
    }
    Ok(log_probs
        .iter()
        .map(|lp| perplexity_from_log_probs(lp))
        .collect())
}

/// Combines per-partition outputs in partition-id order regardless of
/// arrival order. Runs are concatenated and put in canonical order, counts
/// are added with user sets unioned, and scores are concatenated.
pub fn merge(mut partials: Vec<(usize, Partial)>, plan: &PartitionPlan) -> Result<TaskOutput> {
    partials.sort_by_key(|(p, _)| *p);
    for expected in 0..plan.n_partitions() {
        match partials.get(expected) {
            Some((p, _)) if *p == expected => {}
            _ => return Err(Error::MissingPartition(expected)),
        }
    }
    if partials.len() != plan.n_partitions() {
        return Err(Error::InvalidArgument(format!(
            "{} partial outputs for {} partitions",
            partials.len(),
            plan.n_partitions()
        )));
    }
    let mut iter = partials.into_iter().map(|(_, v)| v);
    let Some(first) = iter.next() else {
        return Err(Error::MissingPartition(0));
    };
    match first {
        Partial::Runs(mut runs) => {
            for p in iter {
                match p {
                    Partial::Runs(r) => runs.extend(r),
                    _ => return Err(mixed()),
                }
            }
            Ok(TaskOutput::Runs(RunMultiset::from_runs(runs)))
        }
        Partial::Counts(mut acc) => {
            for p in iter {
                match p {
                    Partial::Counts(c) => acc = acc.merge(&c),
                    _ => return Err(mixed()),
                }
            }
            Ok(TaskOutput::Counts(acc.finish()))
        }
        Partial::Scores(mut scores) => {
            for p in iter {
                match p {
                    Partial::Scores(s) => scores.extend(s),
                    _ => return Err(mixed()),
                }
            }
            Ok(TaskOutput::Scores(scores))
        }
    }
}

fn mixed() -> Error {
    Error::InvalidArgument("partial outputs of different tasks cannot be merged".into())
}
