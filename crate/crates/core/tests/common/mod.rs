//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use tabaudit::corpus::{
    encode, Corpus, Document, EncodedCorpus, TokenId, UserDocument, Vocabulary,
};
use tabaudit::extractor::{ExtractionConfig, Run};
use tabaudit::lm::{LanguageModel, TableModel};
use tabaudit::stats::{export, LeakageReport, ReportFormat};

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn word(i: usize) -> String {
    format!("w{i}")
}

pub fn doc(user: &str, id: &str, tokens: &[&str]) -> UserDocument {
    Document {
        user_id: user.into(),
        doc_id: id.into(),
        tokens: tokens.iter().map(|t| t.to_string()).collect(),
    }
}

/// Corpus with the vocabulary made of every token it contains, in order of
/// first appearance.
pub fn encode_all(docs: Vec<UserDocument>) -> EncodedCorpus {
    let corpus = Corpus::from_documents(docs).unwrap();
    let mut seen = Vec::new();
    let mut set = BTreeSet::new();
    for d in corpus.documents() {
        for t in &d.tokens {
            if set.insert(t.clone()) {
                seen.push(t.clone());
            }
        }
    }
    let vocab = Vocabulary::from_tokens(seen).unwrap();
    encode(&corpus, Arc::new(vocab))
}

/// Random corpus over `w0..w{v}`, with vocabulary `w0..w{known}` so the
/// rest becomes UNK. Token draws are skewed so small models find runs.
pub fn random_corpus(
    rng: &mut ChaCha8Rng,
    max_docs: usize,
    max_len: usize,
    v: usize,
    known: usize,
    users: usize,
) -> EncodedCorpus {
    let n_docs = rng.gen_range(1..=max_docs);
    let docs: Vec<UserDocument> = (0..n_docs)
        .map(|i| {
            let len = rng.gen_range(1..=max_len);
            let tokens = (0..len)
                .map(|_| {
                    // min of two draws favours low ids
                    let a = rng.gen_range(0..v);
                    let b = rng.gen_range(0..v);
                    word(a.min(b))
                })
                .collect();
            Document {
                user_id: format!("u{}", rng.gen_range(0..users)),
                doc_id: format!("d{i}"),
                tokens,
            }
        })
        .collect();
    let corpus = Corpus::from_documents(docs).unwrap();
    let vocab = Vocabulary::from_tokens((0..known).map(word)).unwrap();
    encode(&corpus, Arc::new(vocab))
}

/// Top-k by full sort on (probability desc, id asc).
pub fn naive_top_k(dist: &[f64], k: usize) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..dist.len() as TokenId).collect();
    ids.sort_by(|&a, &b| {
        dist[b as usize]
            .partial_cmp(&dist[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    ids
}

/// Per-position brute force: each position t ≥ 1 is judged from the full
/// next-token distribution, then maximal blocks are cut. Runs come out in
/// (user, doc, start) order.
pub fn brute_force_runs<M: LanguageModel>(
    model: &M,
    corpus: &EncodedCorpus,
    config: &ExtractionConfig,
) -> Vec<Run> {
    let unk = corpus.vocab().unk_id();
    let mut out = Vec::new();
    for d in corpus.documents() {
        let toks = &d.tokens;
        let mut ok = vec![None; toks.len()];
        for t in 1..toks.len() {
            let dist = model.next_distribution(&toks[..t]).unwrap();
            let top = naive_top_k(&dist, config.k);
            let mut correct = top.contains(&toks[t]);
            if toks[t] == unk && !config.count_unk_targets {
                correct = false;
            }
            if let Some(cap) = config.confidence_threshold {
                if 1.0 / dist[top[0] as usize] > cap {
                    correct = false;
                }
            }
            if correct {
                ok[t] = Some(dist[toks[t] as usize].ln());
            }
        }
        let mut t = 1;
        while t < toks.len() {
            if ok[t].is_none() {
                t += 1;
                continue;
            }
            let start = t;
            while t < toks.len() && ok[t].is_some() {
                t += 1;
            }
            if t - start >= config.min_run_len {
                out.push(Run {
                    user_id: d.user_id.clone(),
                    doc_id: d.doc_id.clone(),
                    start_pos: start,
                    tokens: toks[start..t].to_vec(),
                    context_tokens: toks[..start].to_vec(),
                    token_log_probs: ok[start..t].iter().map(|x| x.unwrap()).collect(),
                });
            }
        }
    }
    out.sort_by(|a, b| {
        (&a.user_id, &a.doc_id, a.start_pos).cmp(&(&b.user_id, &b.doc_id, b.start_pos))
    });
    out
}

/// Sliding-window count of `pattern`: (total occurrences, distinct users).
pub fn naive_count(corpus: &EncodedCorpus, pattern: &[TokenId]) -> (usize, usize) {
    if pattern.is_empty() {
        return (0, 0);
    }
    let mut total = 0;
    let mut users = BTreeSet::new();
    for d in corpus.documents() {
        if d.tokens.len() < pattern.len() {
            continue;
        }
        for w in d.tokens.windows(pattern.len()) {
            if w == pattern {
                total += 1;
                users.insert(d.user_id.as_str());
            }
        }
    }
    (total, users.len())
}

/// Random patterns: a mix of corpus substrings (so they match) and random
/// strings (mostly absent).
pub fn random_patterns(
    rng: &mut ChaCha8Rng,
    corpus: &EncodedCorpus,
    n: usize,
    max_len: usize,
) -> Vec<Vec<TokenId>> {
    let v = corpus.vocab().size() as TokenId;
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            if rng.gen_bool(0.7) {
                let d = &corpus.documents()[rng.gen_range(0..corpus.len())].tokens;
                let len = len.min(d.len());
                let s = rng.gen_range(0..=d.len() - len);
                d[s..s + len].to_vec()
            } else {
                (0..len).map(|_| rng.gen_range(0..v)).collect()
            }
        })
        .collect()
}

pub fn report_bytes(report: &LeakageReport, format: ReportFormat) -> Vec<u8> {
    let mut buf = Vec::new();
    export(report, format, &mut buf).unwrap();
    buf
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// The 11 (PP_lm, PP_public) pairs of the worked ε_l example, with the
/// printed two-decimal log-ratios.
pub const EPSILON_PAIRS: [(&str, f64, f64, f64); 11] = [
    ("said , I think you should be able to", 4.39, 5.21, 0.17),
    ("me a link to your post ?", 3.33, 3.49, 0.05),
    ("you feel better , then you can", 5.4, 5.53, 0.02),
    ("has any questions or concerns , please", 5.1, 8.87, 0.55),
    ("as I know , I think the", 3.75, 4.5, 0.18),
    ("Court , he would have", 4.46, 5.22, 0.16),
    ("want * to be ?", 4.17, 3.63, -0.14),
    ("like is that you are", 5.35, 5.78, 0.08),
    ("of people ) are", 5.14, 4.21, -0.2),
    ("Wars , we have", 7.28, 7.36, 0.01),
    ("Wars ) is", 3.53, 6.69, 0.64),
];
pub const EPSILON_L: f64 = 0.64;

/// Two stub models whose perplexities on item `i` (context `[i]`, one
/// sequence token) are exactly the `i`-th pair.
pub fn epsilon_stub_models() -> (TableModel, TableModel, Vec<tabaudit::metrics::ScoreItem>) {
    let v = 64;
    let mut private = TableModel::uniform(v);
    let mut public = TableModel::uniform(v);
    let mut items = Vec::new();
    for (i, &(label, pp_lm, pp_public, _)) in EPSILON_PAIRS.iter().enumerate() {
        let ctx = vec![i as TokenId];
        let target = 40 as TokenId;
        private.set(ctx.clone(), vec![(target, 1.0 / pp_lm)]).unwrap();
        public.set(ctx.clone(), vec![(target, 1.0 / pp_public)]).unwrap();
        items.push(tabaudit::metrics::ScoreItem {
            label: label.into(),
            context: ctx,
            sequence: vec![target],
        });
    }
    (private, public, items)
}

/// The "very much" leakage example: one user's two documents are
/// reproduced by the model with perplexities 1.3 and 3.6, while four other
/// users hold the remaining eight occurrences in contexts the model gets
/// wrong.
pub fn table1_fixture() -> (EncodedCorpus, TableModel) {
    let mut docs = vec![
        doc("A", "1", &["Thank", "you", "very", "much"]),
        doc("A", "2", &["I", "like", "cats", "very", "much"]),
    ];
    for u in ["B", "C", "D", "E"] {
        docs.push(doc(u, "1", &["so", "very", "much", "and", "very", "much"]));
    }
    let corpus = encode_all(docs);
    let vocab = corpus.vocab().clone();
    let id = |t: &str| vocab.get(t).unwrap();
    let unk = vocab.unk_id();
    let mut model = TableModel::with_default(vocab.size(), vec![(unk, 0.9)]).unwrap();
    let (very, much) = (id("very"), id("much"));
    let set = |m: &mut TableModel, ctx: &[&str], tok: TokenId, p: f64| {
        m.set(ctx.iter().map(|t| id(t)).collect(), vec![(tok, p)]).unwrap();
    };
    set(&mut model, &["Thank", "you"], very, 1.0 / 1.3);
    set(&mut model, &["Thank", "you", "very"], much, 1.0 / 1.3);
    set(&mut model, &["I", "like", "cats"], very, 1.0 / 3.6);
    set(&mut model, &["I", "like", "cats", "very"], much, 1.0 / 3.6);
    (corpus, model)
}

/// Synthetic population for the canary study: `users` users draw noisy
/// sentences from a shared phrase pool; `owner` additionally writes the
/// canary (after a marker token) `repeats` times.
pub struct CanaryCorpus {
    pub corpus: EncodedCorpus,
    pub canary: Vec<String>,
    pub owner: String,
}

pub fn canary_corpus(seed: u64, users: usize, repeats: usize) -> CanaryCorpus {
    let mut rng = rng(seed);
    let pool_words = 300;
    let phrases: Vec<Vec<String>> = (0..60)
        .map(|_| {
            let len = rng.gen_range(6..=12);
            (0..len).map(|_| word(rng.gen_range(0..pool_words))).collect()
        })
        .collect();
    let canary: Vec<String> = (0..8).map(|i| format!("c{i}")).collect();
    let owner = format!("user{:03}", users / 2);
    let mut docs = Vec::new();
    for u in 0..users {
        let user = format!("user{u:03}");
        for d in 0..6 {
            let mut tokens = phrases.choose(&mut rng).unwrap().clone();
            for t in tokens.iter_mut() {
                if rng.gen_bool(0.1) {
                    *t = word(rng.gen_range(0..pool_words));
                }
            }
            docs.push(Document {
                user_id: user.clone(),
                doc_id: format!("d{d}"),
                tokens,
            });
        }
        if user == owner {
            for r in 0..repeats {
                let mut tokens = vec!["pin".to_string()];
                tokens.extend(canary.iter().cloned());
                docs.push(Document {
                    user_id: user.clone(),
                    doc_id: format!("canary{r}"),
                    tokens,
                });
            }
        }
    }
    CanaryCorpus {
        corpus: encode_all(docs),
        canary,
        owner,
    }
}

/// Perplexity computed directly from the distribution chain.
pub fn naive_perplexity<M: LanguageModel>(model: &M, context: &[TokenId], seq: &[TokenId]) -> f64 {
    let mut full = context.to_vec();
    let mut sum = 0.0;
    for &t in seq {
        let dist = model.next_distribution(&full).unwrap();
        sum += dist[t as usize].ln();
        full.push(t);
    }
    (-sum / seq.len() as f64).exp()
}
