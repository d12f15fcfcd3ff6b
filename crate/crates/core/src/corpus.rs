//! User-keyed training data: ingestion, tokenization, vocabularies and
//! corpus-level transforms (dedup, user exclusion).
//!
//! A corpus is an ordered list of documents, each owned by one user. The
//! same container holds raw token strings ([`Corpus`]) and vocabulary ids
//! ([`EncodedCorpus`]); transforms that only look at document keys or token
//! equality are written once for both.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Dense vocabulary index.
pub type TokenId = u32;

/// Reserved literal for out-of-vocabulary tokens. Always the last id.
pub const UNK: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Document<T> {
    pub user_id: String,
    pub doc_id: String,
    pub tokens: Vec<T>,
}

pub type UserDocument = Document<String>;
pub type EncodedDocument = Document<TokenId>;

/// Documents in ingestion order plus a user → document-index map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus<T = String> {
    documents: Vec<Document<T>>,
    user_index: BTreeMap<String, Vec<usize>>,
}

impl<T> Default for Corpus<T> {
    fn default() -> Self {
        Self {
            documents: Vec::new(),
            user_index: BTreeMap::new(),
        }
    }
}

impl<T> Corpus<T> {
    /// Builds a corpus, rejecting empty documents and repeated
    /// `(user_id, doc_id)` keys.
    pub fn from_documents(documents: Vec<Document<T>>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, doc) in documents.iter().enumerate() {
            if doc.tokens.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "document {i} ({}/{}) has no tokens",
                    doc.user_id, doc.doc_id
                )));
            }
            if !seen.insert((doc.user_id.as_str(), doc.doc_id.as_str())) {
                return Err(Error::DuplicateDocument {
                    line: i + 1,
                    user_id: doc.user_id.clone(),
                    doc_id: doc.doc_id.clone(),
                });
            }
        }
        Ok(Self::from_checked(documents))
    }

    fn from_checked(documents: Vec<Document<T>>) -> Self {
        let mut user_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, doc) in documents.iter().enumerate() {
            user_index.entry(doc.user_id.clone()).or_default().push(i);
        }
        Self {
            documents,
            user_index,
        }
    }

    pub fn documents(&self) -> &[Document<T>] {
        &self.documents
    }

    pub fn into_documents(self) -> Vec<Document<T>> {
        self.documents
    }

    pub fn user_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.user_index
    }

    /// Distinct user ids, sorted.
    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.user_index.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(|d| d.tokens.len()).sum()
    }
}

impl<T: Clone> Corpus<T> {
    /// Keeps exactly the documents whose owner is not in `users`, in order.
    /// Unknown user ids are ignored.
    pub fn exclude_users<S: AsRef<str>>(&self, users: &[S]) -> Self {
        let drop: HashSet<&str> = users.iter().map(AsRef::as_ref).collect();
        let kept = self
            .documents
            .iter()
            .filter(|d| !drop.contains(d.user_id.as_str()))
            .cloned()
            .collect();
        Self::from_checked(kept)
    }
}

impl<T: Clone + Eq + Hash> Corpus<T> {
    /// Removes documents whose token sequence exactly repeats an earlier one
    /// (across all users). Returns the surviving corpus and the removal count.
    pub fn dedup_sentences(&self) -> (Self, usize) {
        let mut seen: HashSet<&[T]> = HashSet::with_capacity(self.documents.len());
        let mut kept = Vec::with_capacity(self.documents.len());
        for doc in &self.documents {
            if seen.insert(doc.tokens.as_slice()) {
                kept.push(doc.clone());
            }
        }
        let removed = self.documents.len() - kept.len();
        (Self::from_checked(kept), removed)
    }
}

/// Result of [`ingest`]: the corpus plus how many records were dropped for
/// tokenizing to nothing.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub corpus: Corpus,
    pub dropped_empty: usize,
}

#[derive(Deserialize)]
struct Record {
    user_id: Option<String>,
    doc_id: Option<String>,
    text: Option<String>,
    tokens: Option<Vec<String>>,
}

/// Reads line-delimited JSON records (`user_id`, optional `doc_id`, and
/// exactly one of `text` or `tokens`). Blank lines are skipped.
///
/// A missing `doc_id` is assigned as `#<n>`, where `n` is the number of
/// records already seen for that user.
pub fn ingest<R: BufRead>(reader: R) -> Result<Ingested> {
    let mut documents = Vec::new();
    let mut keys: HashSet<(String, String)> = HashSet::new();
    let mut per_user: HashMap<String, usize> = HashMap::new();
    let mut dropped_empty = 0;

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedRecord {
            line: line_no,
            message,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let user_id = record
            .user_id
            .ok_or_else(|| malformed("missing field `user_id`".into()))?;
        let tokens = match (record.text, record.tokens) {
            (Some(text), None) => tokenize(&text),
            (None, Some(tokens)) => {
                if let Some(bad) = tokens
                    .iter()
                    .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
                {
                    return Err(malformed(format!(
                        "token {bad:?} is empty or contains whitespace"
                    )));
                }
                tokens
            }
            (Some(_), Some(_)) => {
                return Err(malformed("both `text` and `tokens` present".into()))
            }
            (None, None) => return Err(malformed("one of `text` or `tokens` is required".into())),
        };

        let seq = per_user.entry(user_id.clone()).or_insert(0);
        let doc_id = record.doc_id.unwrap_or_else(|| format!("#{seq}"));
        *seq += 1;

        if !keys.insert((user_id.clone(), doc_id.clone())) {
            return Err(Error::DuplicateDocument {
                line: line_no,
                user_id,
                doc_id,
            });
        }
        if tokens.is_empty() {
            dropped_empty += 1;
            continue;
        }
        documents.push(Document {
            user_id,
            doc_id,
            tokens,
        });
    }

    Ok(Ingested {
        corpus: Corpus::from_checked(documents),
        dropped_empty,
    })
}

/// Punctuation that is split off word edges. ASCII punctuation plus the
/// common Latin-1, general-punctuation and CJK marks.
pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c,
            '\u{00A1}' | '\u{00A7}' | '\u{00AB}' | '\u{00B6}' | '\u{00B7}' | '\u{00BB}' | '\u{00BF}'
            | '\u{2010}'..='\u{2027}'
            | '\u{2030}'..='\u{205E}'
            | '\u{3001}'..='\u{3003}'
            | '\u{3008}'..='\u{3011}'
            | '\u{FF01}'..='\u{FF0F}')
}

/// Splits on Unicode whitespace, then peels leading and trailing punctuation
/// marks off each word as standalone single-character tokens. Inner
/// punctuation (`don't`, `3.5`) stays attached.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        let mut lo = 0;
        while lo < chars.len() && is_punctuation(chars[lo].1) {
            lo += 1;
        }
        if lo == chars.len() {
            out.extend(chars.iter().map(|(_, c)| c.to_string()));
            continue;
        }
        let mut hi = chars.len();
        while hi > lo && is_punctuation(chars[hi - 1].1) {
            hi -= 1;
        }
        out.extend(chars[..lo].iter().map(|(_, c)| c.to_string()));
        let start = chars[lo].0;
        let end = chars.get(hi).map_or(word.len(), |(b, _)| *b);
        out.push(word[start..end].to_string());
        out.extend(chars[hi..].iter().map(|(_, c)| c.to_string()));
    }
    out
}

/// Token ⇄ id mapping. Ids are dense; `<unk>` is always the last id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens in id order; `<unk>` is appended.
    pub fn from_tokens<I>(tokens: I) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: Into<String>,
    {
        let mut list: Vec<String> = Vec::new();
        let mut ids = HashMap::new();
        for tok in tokens {
            let tok = tok.into();
            if tok == UNK {
                return Err(Error::InvalidVocabulary(format!("{UNK} is reserved")));
            }
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocabulary(format!("bad token {tok:?}")));
            }
            let id = list.len() as TokenId;
            if ids.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate token {tok:?}")));
            }
            list.push(tok);
        }
        ids.insert(UNK.to_string(), list.len() as TokenId);
        list.push(UNK.to_string());
        Ok(Self { tokens: list, ids })
    }

    /// Size including `<unk>`.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn unk_id(&self) -> TokenId {
        (self.tokens.len() - 1) as TokenId
    }

    /// Id of `token`, or `<unk>` when absent.
    pub fn id_of(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or_else(|| self.unk_id())
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token_of(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// All tokens in id order, `<unk>` last.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token_of(id).unwrap_or(UNK).to_string())
            .collect()
    }

    /// One token per line, id order, `<unk>` last.
    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<()> {
        for tok in &self.tokens {
            writeln!(sink, "{tok}")?;
        }
        sink.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = Vec::new();
        for line in reader.lines() {
            lines.push(line?);
        }
        match lines.pop() {
            Some(last) if last == UNK => Self::from_tokens(lines),
            _ => Err(Error::InvalidVocabulary(format!(
                "last line must be {UNK}"
            ))),
        }
    }
}

/// Keeps the `k` most frequent tokens; ties broken by ascending token.
pub fn build_vocab_topk(corpus: &Corpus, k: usize) -> Result<Vocabulary> {
    if k == 0 {
        return Err(Error::InvalidArgument("top-k vocabulary needs k >= 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in corpus.documents() {
        for tok in &doc.tokens {
            if tok != UNK {
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
    }
    Vocabulary::from_tokens(ranked(counts).into_iter().take(k))
}

/// Keeps tokens appearing in at least `m` distinct users' documents.
pub fn build_vocab_user_threshold(corpus: &Corpus, m: usize) -> Result<Vocabulary> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "user-threshold vocabulary needs m >= 1".into(),
        ));
    }
    let mut users: HashMap<&str, HashSet<&str>> = HashMap::new();
    for doc in corpus.documents() {
        for tok in &doc.tokens {
            if tok != UNK {
                users
                    .entry(tok.as_str())
                    .or_default()
                    .insert(doc.user_id.as_str());
            }
        }
    }
    let counts = users
        .into_iter()
        .map(|(tok, set)| (tok, set.len()))
        .filter(|&(_, n)| n >= m)
        .collect();
    Vocabulary::from_tokens(ranked(counts))
}

fn ranked(counts: HashMap<&str, usize>) -> Vec<String> {
    let mut entries: Vec<(&str, usize)> = counts.into_iter().collect();
    entries.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    entries.into_iter().map(|(t, _)| t.to_string()).collect()
}

/// A corpus mapped onto vocabulary ids.
#[derive(Clone, Debug)]
pub struct EncodedCorpus {
    corpus: Corpus<TokenId>,
    vocab: Arc<Vocabulary>,
}

impl EncodedCorpus {
    /// Wraps already-encoded documents, checking every id against `vocab`.
    pub fn new(corpus: Corpus<TokenId>, vocab: Arc<Vocabulary>) -> Result<Self> {
        let size = vocab.size();
        for doc in corpus.documents() {
            if let Some(&bad) = doc.tokens.iter().find(|&&t| t as usize >= size) {
                return Err(Error::TokenOutOfRange {
                    token: bad,
                    vocab_size: size,
                });
            }
        }
        Ok(Self { corpus, vocab })
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn corpus(&self) -> &Corpus<TokenId> {
        &self.corpus
    }

    pub fn documents(&self) -> &[EncodedDocument] {
        self.corpus.documents()
    }

    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    pub fn exclude_users<S: AsRef<str>>(&self, users: &[S]) -> Self {
        Self {
            corpus: self.corpus.exclude_users(users),
            vocab: Arc::clone(&self.vocab),
        }
    }

    /// Keeps the documents at `range`, preserving order.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            corpus: Corpus::from_checked(self.corpus.documents()[range].to_vec()),
            vocab: Arc::clone(&self.vocab),
        }
    }

    pub fn decode(&self) -> Corpus {
        let docs = self
            .documents()
            .iter()
            .map(|d| Document {
                user_id: d.user_id.clone(),
                doc_id: d.doc_id.clone(),
                tokens: self.vocab.decode(&d.tokens),
            })
            .collect();
        Corpus::from_checked(docs)
    }

    /// Fraction of token positions mapped to `<unk>`.
    pub fn oov_rate(&self) -> f64 {
        let total = self.corpus.token_count();
        if total == 0 {
            return 0.0;
        }
        let unk = self.vocab.unk_id();
        let oov = self
            .documents()
            .iter()
            .flat_map(|d| d.tokens.iter())
            .filter(|&&t| t == unk)
            .count();
        oov as f64 / total as f64
    }
}

/// Maps every token through `vocab`; out-of-vocabulary tokens become `<unk>`.
pub fn encode(corpus: &Corpus, vocab: Arc<Vocabulary>) -> EncodedCorpus {
    let docs = corpus
        .documents()
        .iter()
        .map(|d| Document {
            user_id: d.user_id.clone(),
            doc_id: d.doc_id.clone(),
            tokens: d.tokens.iter().map(|t| vocab.id_of(t)).collect(),
        })
        .collect();
    EncodedCorpus {
        corpus: Corpus::from_checked(docs),
        vocab,
    }
}
