use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LanguageModel;
use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// A model given by explicit tables: exact contexts map to sparse
/// distributions, and every other context uses `default`.
///
/// A sparse distribution lists `(token, probability)` pairs; the remaining
/// mass is shared equally by the unlisted tokens. Useful for stubbing a
/// model with known perplexities, or serving a fixed unigram distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableModel {
    vocab_size: usize,
    default: Vec<(TokenId, f64)>,
    /// Stored as a `[context, distribution]` list: JSON keys must be strings.
    #[serde(with = "entry_list")]
    entries: BTreeMap<Vec<TokenId>, Vec<(TokenId, f64)>>,
}

mod entry_list {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serializer};

    use crate::corpus::TokenId;

    type Entries = BTreeMap<Vec<TokenId>, Vec<(TokenId, f64)>>;

    pub fn serialize<S: Serializer>(entries: &Entries, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(entries.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Entries, D::Error> {
        let list = Vec::<(Vec<TokenId>, Vec<(TokenId, f64)>)>::deserialize(d)?;
        let n = list.len();
        let map: Entries = list.into_iter().collect();
        if map.len() != n {
            return Err(serde::de::Error::custom("repeated context in table model"));
        }
        Ok(map)
    }
}

impl TableModel {
    pub fn uniform(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            default: Vec::new(),
            entries: BTreeMap::new(),
        }
    }

    pub fn with_default(vocab_size: usize, default: Vec<(TokenId, f64)>) -> Result<Self> {
        let mut m = Self::uniform(vocab_size);
        check_sparse(vocab_size, &default)?;
        m.default = default;
        Ok(m)
    }

    /// Full-vector form of [`with_default`](Self::with_default).
    pub fn unigram(dist: &[f64]) -> Result<Self> {
        Self::with_default(
            dist.len(),
            dist.iter().enumerate().map(|(t, &p)| (t as TokenId, p)).collect(),
        )
    }

    /// Overrides the distribution after exactly `context`.
    pub fn set(&mut self, context: Vec<TokenId>, dist: Vec<(TokenId, f64)>) -> Result<()> {
        check_sparse(self.vocab_size, &dist)?;
        if let Some(&bad) = context.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab_size: self.vocab_size,
            });
        }
        self.entries.insert(context, dist);
        Ok(())
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::InvalidModel("vocab_size must be positive".into()));
        }
        check_sparse(self.vocab_size, &self.default)?;
        for (ctx, dist) in &self.entries {
            if ctx.iter().any(|&t| t as usize >= self.vocab_size) {
                return Err(Error::InvalidModel(format!("context {ctx:?} out of range")));
            }
            check_sparse(self.vocab_size, dist)?;
        }
        Ok(())
    }

    fn expand(&self, sparse: &[(TokenId, f64)]) -> Vec<f64> {
        let listed: f64 = sparse.iter().map(|e| e.1).sum();
        let unlisted = self.vocab_size - sparse.len();
        let rest = if unlisted == 0 {
            0.0
        } else {
            ((1.0 - listed) / unlisted as f64).max(0.0)
        };
        let mut dist = vec![rest; self.vocab_size];
        for &(t, p) in sparse {
            dist[t as usize] = p;
        }
        dist
    }
}

fn check_sparse(vocab_size: usize, dist: &[(TokenId, f64)]) -> Result<()> {
    let mut seen = vec![false; vocab_size];
    for &(t, p) in dist {
        if t as usize >= vocab_size || std::mem::replace(&mut seen[t as usize], true) {
            return Err(Error::InvalidModel(format!("bad or repeated token {t}")));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidModel(format!("probability {p} outside [0, 1]")));
        }
    }
    let sum: f64 = dist.iter().map(|e| e.1).sum();
    if sum > 1.0 + 1e-9 || (dist.len() == vocab_size && (sum - 1.0).abs() > 1e-9) {
        return Err(Error::InvalidModel(format!("probabilities sum to {sum}")));
    }
    Ok(())
}

impl LanguageModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let sparse = self.entries.get(context).unwrap_or(&self.default);
        Ok(self.expand(sparse))
    }
}
