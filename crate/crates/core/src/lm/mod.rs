//! The language-model interface consumed by extraction and scoring, plus
//! the built-in models and the on-disk model format.

mod adapter;
mod ngram;
mod table;

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};

pub use adapter::{AdapterModel, PROTOCOL_VERSION};
pub use ngram::{train_ngram, InterpolatedNgramLm, DEFAULT_LAMBDAS, DEFAULT_ORDER};
pub use table::TableModel;

/// One position to score: the context seen so far and the true next token.
#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    pub context: &'a [TokenId],
    pub target: TokenId,
}

/// Answer to a [`Query`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Ranked by (probability desc, id asc).
    pub top_k: Vec<TokenId>,
    /// Probability of `top_k[0]`.
    pub top1_prob: f64,
    /// Natural-log probability of the query target.
    pub target_log_prob: f64,
}

/// Next-token model over a fixed vocabulary `0..vocab_size`.
///
/// Implementations only have to provide [`vocab_size`] and
/// [`next_distribution`]; ranking, scoring and batching derive from those.
/// Every derived method must agree with the full distribution.
///
/// [`vocab_size`]: LanguageModel::vocab_size
/// [`next_distribution`]: LanguageModel::next_distribution
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn next_distribution(&self, context: &[TokenId]) -> Result<Vec<f64>>;

    fn log_prob(&self, context: &[TokenId], token: TokenId) -> Result<f64> {
        check_token(token, self.vocab_size())?;
        Ok(self.next_distribution(context)?[token as usize].ln())
    }

    fn top_k(&self, context: &[TokenId], k: usize) -> Result<Vec<TokenId>> {
        check_k(k, self.vocab_size())?;
        Ok(rank_top_k(&self.next_distribution(context)?, k))
    }

    /// Batch scoring entry point used by the pipeline. One prediction per
    /// query, in query order.
    fn predict_batch(&self, queries: &[Query<'_>], k: usize) -> Result<Vec<Prediction>> {
        check_k(k, self.vocab_size())?;
        queries
            .iter()
            .map(|q| {
                check_token(q.target, self.vocab_size())?;
                let dist = self.next_distribution(q.context)?;
                let top_k = rank_top_k(&dist, k);
                Ok(Prediction {
                    top1_prob: dist[top_k[0] as usize],
                    target_log_prob: dist[q.target as usize].ln(),
                    top_k,
                })
            })
            .collect()
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn next_distribution(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        (**self).next_distribution(context)
    }
    fn log_prob(&self, context: &[TokenId], token: TokenId) -> Result<f64> {
        (**self).log_prob(context, token)
    }
    fn top_k(&self, context: &[TokenId], k: usize) -> Result<Vec<TokenId>> {
        (**self).top_k(context, k)
    }
    fn predict_batch(&self, queries: &[Query<'_>], k: usize) -> Result<Vec<Prediction>> {
        (**self).predict_batch(queries, k)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Box<M> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn next_distribution(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        (**self).next_distribution(context)
    }
    fn log_prob(&self, context: &[TokenId], token: TokenId) -> Result<f64> {
        (**self).log_prob(context, token)
    }
    fn top_k(&self, context: &[TokenId], k: usize) -> Result<Vec<TokenId>> {
        (**self).top_k(context, k)
    }
    fn predict_batch(&self, queries: &[Query<'_>], k: usize) -> Result<Vec<Prediction>> {
        (**self).predict_batch(queries, k)
    }
}

pub(crate) fn check_k(k: usize, vocab_size: usize) -> Result<()> {
    if k == 0 || k > vocab_size {
        return Err(Error::InvalidArgument(format!(
            "top-k width {k} outside 1..={vocab_size}"
        )));
    }
    Ok(())
}

pub(crate) fn check_token(token: TokenId, vocab_size: usize) -> Result<()> {
    if token as usize >= vocab_size {
        return Err(Error::TokenOutOfRange { token, vocab_size });
    }
    Ok(())
}

fn rank_order(dist: &[f64], a: TokenId, b: TokenId) -> Ordering {
    dist[b as usize]
        .total_cmp(&dist[a as usize])
        .then_with(|| a.cmp(&b))
}

/// First `k` ids of the ranking by (probability desc, id asc).
pub fn rank_top_k(dist: &[f64], k: usize) -> Vec<TokenId> {
    let k = k.min(dist.len());
    let mut ids: Vec<TokenId> = (0..dist.len() as TokenId).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < ids.len() {
        ids.select_nth_unstable_by(k - 1, |&a, &b| rank_order(dist, a, b));
        ids.truncate(k);
    }
    ids.sort_unstable_by(|&a, &b| rank_order(dist, a, b));
    ids
}

/// Top-k with the width checked against the model's vocabulary.
pub fn top_k<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    k: usize,
) -> Result<Vec<TokenId>> {
    check_k(k, model.vocab_size())?;
    model.top_k(context, k)
}

/// Per-token natural-log probabilities of `sequence`, each token conditioned
/// on `context` followed by the sequence tokens before it.
pub fn sequence_log_prob<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    sequence: &[TokenId],
) -> Result<Vec<f64>> {
    if sequence.is_empty() {
        return Err(Error::InvalidArgument("cannot score an empty sequence".into()));
    }
    let mut full = Vec::with_capacity(context.len() + sequence.len());
    full.extend_from_slice(context);
    full.extend_from_slice(sequence);
    let queries: Vec<Query<'_>> = (0..sequence.len())
        .map(|i| Query {
            context: &full[..context.len() + i],
            target: sequence[i],
        })
        .collect();
    queries
        .iter()
        .map(|q| model.log_prob(q.context, q.target))
        .collect()
}

const MODEL_FORMAT: &str = "tabaudit-model";
const MODEL_FORMAT_VERSION: u32 = 1;

/// A model that can be written to and read from a model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StoredModel {
    Ngram(InterpolatedNgramLm),
    Table(TableModel),
}

#[derive(Serialize, Deserialize)]
struct ModelFile<M> {
    format: String,
    version: u32,
    tool_version: String,
    model: M,
}

impl StoredModel {
    pub fn save<W: Write>(&self, sink: W) -> Result<()> {
        let mut sink = BufWriter::new(sink);
        serde_json::to_writer(
            &mut sink,
            &ModelFile {
                format: MODEL_FORMAT.into(),
                version: MODEL_FORMAT_VERSION,
                tool_version: crate::TOOL_VERSION.into(),
                model: self,
            },
        )?;
        sink.write_all(b"\n")?;
        sink.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn load<R: Read>(source: R) -> Result<Self> {
        let file: ModelFile<StoredModel> = serde_json::from_reader(BufReader::new(source))?;
        if file.format != MODEL_FORMAT || file.version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidModel(format!(
                "unsupported model file {} v{}",
                file.format, file.version
            )));
        }
        file.model.validate()?;
        Ok(file.model)
    }

    pub fn save_path(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::file(path, e))?;
        self.save(f)
    }

    pub fn load_path(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::file(path, e))?;
        Self::load(f)
    }

    fn validate(&self) -> Result<()> {
        match self {
            StoredModel::Ngram(m) => m.validate(),
            StoredModel::Table(m) => m.validate(),
        }
    }

    fn inner(&self) -> &dyn LanguageModel {
        match self {
            StoredModel::Ngram(m) => m,
            StoredModel::Table(m) => m,
        }
    }
}

impl From<InterpolatedNgramLm> for StoredModel {
    fn from(m: InterpolatedNgramLm) -> Self {
        StoredModel::Ngram(m)
    }
}

impl From<TableModel> for StoredModel {
    fn from(m: TableModel) -> Self {
        StoredModel::Table(m)
    }
}

impl LanguageModel for StoredModel {
    fn vocab_size(&self) -> usize {
        self.inner().vocab_size()
    }
    fn next_distribution(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        self.inner().next_distribution(context)
    }
    fn log_prob(&self, context: &[TokenId], token: TokenId) -> Result<f64> {
        self.inner().log_prob(context, token)
    }
    fn top_k(&self, context: &[TokenId], k: usize) -> Result<Vec<TokenId>> {
        self.inner().top_k(context, k)
    }
    fn predict_batch(&self, queries: &[Query<'_>], k: usize) -> Result<Vec<Prediction>> {
        self.inner().predict_batch(queries, k)
    }
}
