use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::LanguageModel;
use crate::corpus::{EncodedCorpus, TokenId};
use crate::error::{Error, Result};

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_LAMBDAS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];

const LAMBDA_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq)]
struct Successors {
    total: u64,
    /// Sorted by token id.
    counts: Vec<(TokenId, u64)>,
}

impl Successors {
    fn count(&self, token: TokenId) -> u64 {
        self.counts
            .binary_search_by_key(&token, |&(t, _)| t)
            .map_or(0, |i| self.counts[i].1)
    }
}

/// Maximum-likelihood n-gram estimates linearly interpolated with a uniform
/// floor:
///
/// `p(w | ctx) = (λ0/V + Σ_j λj · c(h_j, w) / c(h_j)) / (λ0 + Σ_j λj)`
///
/// where `h_j` is the last `j − 1` context tokens and both sums run over the
/// orders whose history is available and was seen in training. With every
/// order active the denominator is 1; an unseen or too-short history drops
/// its term and the remaining weights are renormalized, so the distribution
/// always sums to one and stays strictly positive (`λ0 > 0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "NgramRepr", try_from = "NgramRepr")]
pub struct InterpolatedNgramLm {
    order: usize,
    lambdas: Vec<f64>,
    vocab_size: usize,
    /// `tables[j - 1]` holds j-gram counts keyed by their (j − 1)-token history.
    tables: Vec<HashMap<Vec<TokenId>, Successors>>,
}

impl InterpolatedNgramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Training count of the j-gram `history ++ [token]`.
    pub fn count(&self, history: &[TokenId], token: TokenId) -> u64 {
        self.tables
            .get(history.len())
            .and_then(|t| t.get(history))
            .map_or(0, |s| s.count(token))
    }

    pub(crate) fn validate(&self) -> Result<()> {
        check_lambdas(self.order, &self.lambdas)?;
        if self.vocab_size == 0 {
            return Err(Error::InvalidModel("vocab_size must be positive".into()));
        }
        if self.tables.len() != self.order {
            return Err(Error::InvalidModel("count table count differs from order".into()));
        }
        for (j, table) in self.tables.iter().enumerate() {
            for (hist, succ) in table {
                if hist.len() != j
                    || hist.iter().any(|&t| t as usize >= self.vocab_size)
                    || succ.counts.iter().any(|&(t, _)| t as usize >= self.vocab_size)
                    || succ.counts.windows(2).any(|w| w[0].0 >= w[1].0)
                    || succ.total != succ.counts.iter().map(|c| c.1).sum::<u64>()
                {
                    return Err(Error::InvalidModel(format!(
                        "inconsistent {}-gram entry for history {hist:?}",
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Active (weight, successors) pairs for `context`, lowest order first.
    fn active<'a>(&'a self, context: &[TokenId]) -> (Vec<(f64, &'a Successors)>, f64) {
        let mut active = Vec::with_capacity(self.order);
        let mut norm = self.lambdas[0];
        for j in 1..=self.order {
            let weight = self.lambdas[j];
            if weight == 0.0 || context.len() < j - 1 {
                continue;
            }
            let history = &context[context.len() - (j - 1)..];
            if let Some(succ) = self.tables[j - 1].get(history) {
                active.push((weight, succ));
                norm += weight;
            }
        }
        (active, norm)
    }

    fn floor(&self) -> f64 {
        self.lambdas[0] / self.vocab_size as f64
    }

    pub fn prob(&self, context: &[TokenId], token: TokenId) -> Result<f64> {
        super::check_token(token, self.vocab_size)?;
        let (active, norm) = self.active(context);
        let mut p = self.floor();
        for (weight, succ) in active {
            let c = succ.count(token);
            if c > 0 {
                p += weight * c as f64 / succ.total as f64;
            }
        }
        Ok(p / norm)
    }
}

impl LanguageModel for InterpolatedNgramLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let (active, norm) = self.active(context);
        let mut dist = vec![self.floor(); self.vocab_size];
        for (weight, succ) in active {
            let total = succ.total as f64;
            for &(t, c) in &succ.counts {
                dist[t as usize] += weight * c as f64 / total;
            }
        }
        for p in &mut dist {
            *p /= norm;
        }
        Ok(dist)
    }

    fn log_prob(&self, context: &[TokenId], token: TokenId) -> Result<f64> {
        Ok(self.prob(context, token)?.ln())
    }
}

fn check_lambdas(order: usize, lambdas: &[f64]) -> Result<()> {
    if order == 0 {
        return Err(Error::InvalidModel("n-gram order must be at least 1".into()));
    }
    if lambdas.len() != order + 1 {
        return Err(Error::InvalidModel(format!(
            "order {order} needs {} interpolation weights, got {}",
            order + 1,
            lambdas.len()
        )));
    }
    if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::InvalidModel("interpolation weights must be >= 0".into()));
    }
    let sum: f64 = lambdas.iter().sum();
    if (sum - 1.0).abs() > LAMBDA_SUM_TOLERANCE {
        return Err(Error::InvalidModel(format!(
            "interpolation weights sum to {sum}, expected 1"
        )));
    }
    if lambdas[0] <= 0.0 {
        return Err(Error::InvalidModel(
            "uniform weight must be positive (zero probabilities otherwise)".into(),
        ));
    }
    Ok(())
}

/// Counts every j-gram (1 ≤ j ≤ `order`) inside each document. Histories
/// never cross document boundaries and there is no start padding.
pub fn train_ngram(
    corpus: &EncodedCorpus,
    order: usize,
    lambdas: &[f64],
) -> Result<InterpolatedNgramLm> {
    check_lambdas(order, lambdas)?;
    let vocab_size = corpus.vocab().size();
    let mut raw: Vec<HashMap<Vec<TokenId>, BTreeMap<TokenId, u64>>> = vec![HashMap::new(); order];
    for doc in corpus.documents() {
        let toks = &doc.tokens;
        for (t, &token) in toks.iter().enumerate() {
            for j in 1..=order.min(t + 1) {
                let history = &toks[t + 1 - j..t];
                let succ = match raw[j - 1].get_mut(history) {
                    Some(s) => s,
                    None => raw[j - 1].entry(history.to_vec()).or_default(),
                };
                *succ.entry(token).or_insert(0) += 1;
            }
        }
    }
    let tables = raw
        .into_iter()
        .map(|table| {
            table
                .into_iter()
                .map(|(hist, counts)| {
                    let counts: Vec<(TokenId, u64)> = counts.into_iter().collect();
                    let total = counts.iter().map(|c| c.1).sum();
                    (hist, Successors { total, counts })
                })
                .collect()
        })
        .collect();
    Ok(InterpolatedNgramLm {
        order,
        lambdas: lambdas.to_vec(),
        vocab_size,
        tables,
    })
}

#[derive(Serialize, Deserialize)]
struct NgramRepr {
    order: usize,
    lambdas: Vec<f64>,
    vocab_size: usize,
    /// Per order: (history, [(token, count)]) sorted by history.
    tables: Vec<Vec<(Vec<TokenId>, Vec<(TokenId, u64)>)>>,
}

impl From<InterpolatedNgramLm> for NgramRepr {
    fn from(m: InterpolatedNgramLm) -> Self {
        let tables = m
            .tables
            .into_iter()
            .map(|table| {
                let mut rows: Vec<_> = table.into_iter().map(|(h, s)| (h, s.counts)).collect();
                rows.sort_unstable_by(|a, b| a.0.cmp(&b.0));
                rows
            })
            .collect();
        NgramRepr {
            order: m.order,
            lambdas: m.lambdas,
            vocab_size: m.vocab_size,
            tables,
        }
    }
}

impl TryFrom<NgramRepr> for InterpolatedNgramLm {
    type Error = Error;

    fn try_from(r: NgramRepr) -> Result<Self> {
        let tables = r
            .tables
            .into_iter()
            .map(|rows| {
                rows.into_iter()
                    .map(|(h, counts)| {
                        let total = counts.iter().map(|c| c.1).sum();
                        (h, Successors { total, counts })
                    })
                    .collect()
            })
            .collect();
        let m = InterpolatedNgramLm {
            order: r.order,
            lambdas: r.lambdas,
            vocab_size: r.vocab_size,
            tables,
        };
        m.validate()?;
        Ok(m)
    }
}
