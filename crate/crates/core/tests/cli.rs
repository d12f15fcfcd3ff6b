mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

use tabaudit::corpus::{EncodedCorpus, Vocabulary};
use tabaudit::lm::StoredModel;
use tabaudit::stats::{export, import, LeakageReport, ReportFormat, ReportRow, Seq};

use common::*;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tabaudit"));
    c.env_remove("TABAUDIT_WORKERS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_corpus(dir: &Path, corpus: &EncodedCorpus) -> PathBuf {
    let path = dir.join("corpus.jsonl");
    let mut text = String::new();
    for d in corpus.decode().documents() {
        text.push_str(&json!({"user_id": d.user_id, "doc_id": d.doc_id, "tokens": d.tokens}).to_string());
        text.push('\n');
    }
    fs::write(&path, text).unwrap();
    path
}

/// Corpus file, vocabulary file (all tokens) and trained model file for the
/// canary population.
struct Staged {
    dir: TempDir,
    corpus: PathBuf,
    vocab: PathBuf,
    model: PathBuf,
    canary: Vec<String>,
}

fn staged_canary() -> Staged {
    let dir = TempDir::new().unwrap();
    let fixture = canary_corpus(11, 60, 5);
    let corpus = write_corpus(dir.path(), &fixture.corpus);
    let vocab = dir.path().join("vocab.txt");
    let model = dir.path().join("model.json");
    ok(&["build-vocab", "--corpus", p(&corpus), "--topk", "100000", "--out", p(&vocab)]);
    ok(&["train", "--corpus", p(&corpus), "--vocab", p(&vocab), "--out", p(&model)]);
    Staged {
        dir,
        corpus,
        vocab,
        model,
        canary: fixture.canary,
    }
}

#[test]
fn build_vocab_topk_writes_k_plus_unk_lines() {
    let dir = TempDir::new().unwrap();
    let mut rng = rng(1);
    let corpus = random_corpus(&mut rng, 40, 50, 400, 400, 5);
    assert!(corpus.vocab().size() > 101);
    let path = write_corpus(dir.path(), &corpus);
    let vocab = dir.path().join("v.txt");
    let stdout = ok(&["build-vocab", "--corpus", p(&path), "--topk", "100", "--out", p(&vocab)]);
    let text = fs::read_to_string(&vocab).unwrap();
    assert_eq!(text.lines().count(), 101);
    assert_eq!(text.lines().last(), Some("<unk>"));

    // Reported OOV rate equals an independent recount.
    let kept: std::collections::HashSet<&str> = text.lines().collect();
    let decoded = corpus.decode();
    let all: Vec<&String> = decoded.documents().iter().flat_map(|d| &d.tokens).collect();
    let oov = all.iter().filter(|t| !kept.contains(t.as_str())).count();
    let want = format!("oov rate: {:.6}", oov as f64 / all.len() as f64);
    assert!(stdout.contains(&want), "{stdout} lacks {want}");
    assert!(stdout.contains("vocabulary size: 101"));
}

#[test]
fn vocab_policies_are_exclusive() {
    let dir = TempDir::new().unwrap();
    let c = dir.path().join("c.jsonl");
    fs::write(&c, "{\"user_id\":\"a\",\"text\":\"hi there\"}\n").unwrap();
    let v = dir.path().join("v.txt");
    let out = run(&["build-vocab", "--corpus", p(&c), "--topk", "3", "--user-threshold", "1", "--out", p(&v)]);
    assert_eq!(code(&out), 2);
    let out = run(&["build-vocab", "--corpus", p(&c), "--out", p(&v)]);
    assert_eq!(code(&out), 2);
    // A config file cannot smuggle both in either.
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "topk = 3\nuser-threshold = 1\n").unwrap();
    let out = run(&["--config", p(&cfg), "build-vocab", "--corpus", p(&c), "--out", p(&v)]);
    assert_eq!(code(&out), 2);
    // ...but a flag overrides the config's policy.
    fs::write(&cfg, "user-threshold = 5\n").unwrap();
    ok(&["--config", p(&cfg), "build-vocab", "--corpus", p(&c), "--topk", "1", "--out", p(&v)]);
    assert_eq!(fs::read_to_string(&v).unwrap().lines().count(), 2);
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["analyze", "--k", "nope"])), 2);
    let missing = dir.path().join("missing.jsonl");
    let v = dir.path().join("v.txt");
    let out = run(&["build-vocab", "--corpus", p(&missing), "--topk", "3", "--out", p(&v)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"user_id\":\"a\",\"text\":\"x\"}\nnot json\n").unwrap();
    let out = run(&["build-vocab", "--corpus", p(&bad), "--topk", "3", "--out", p(&v)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "no-such-key = 1\n").unwrap();
    let out = run(&["--config", p(&cfg), "build-vocab", "--topk", "3"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn analyze_finds_the_canary_and_is_deterministic() {
    let s = staged_canary();
    let d = s.dir.path();
    let report = d.join("uniq.csv");
    let summary = d.join("summary.json");
    let stdout = ok(&[
        "analyze", "--corpus", p(&s.corpus), "--vocab", p(&s.vocab), "--model", p(&s.model),
        "--k", "1", "--filter", "unique", "--out", p(&report), "--summary", p(&summary),
        "--workers", "1",
    ]);
    assert!(stdout.contains("unique sequences |S_uniq|:"));
    let parsed = import(ReportFormat::Csv, fs::read(&report).unwrap().as_slice()).unwrap();
    let canary = Seq::Tokens(s.canary.clone());
    assert!(parsed.rows.iter().any(|r| r.sequence == canary));
    assert!(parsed.rows.iter().all(|r| r.user_in_d == 1));

    let doc: Value = serde_json::from_str(&fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(doc["tool_version"], tabaudit::TOOL_VERSION);
    assert_eq!(doc["rows_written"].as_u64().unwrap() as usize, parsed.rows.len());
    assert_eq!(doc["unique_sequences"], doc["rows_written"]);

    // Same bytes for other worker, partition and batch settings, and for the
    // in-process training path.
    let first = fs::read(&report).unwrap();
    for extra in [
        vec!["--workers", "3", "--partitions", "7", "--batch-size", "5"],
        vec!["--workers", "2", "--batch-size", "1"],
    ] {
        let again = d.join("again.csv");
        let mut args = vec![
            "analyze", "--corpus", p(&s.corpus), "--vocab", p(&s.vocab), "--model", p(&s.model),
            "--filter", "unique", "--out", p(&again),
        ];
        args.extend(extra);
        ok(&args);
        assert_eq!(fs::read(&again).unwrap(), first);
    }
    let trained = d.join("trained.csv");
    ok(&[
        "analyze", "--corpus", p(&s.corpus), "--vocab", p(&s.vocab), "--train-ngram",
        "--filter", "unique", "--out", p(&trained),
    ]);
    assert_eq!(fs::read(&trained).unwrap(), first);
}

#[test]
fn wider_k_never_loses_correct_positions() {
    let s = staged_canary();
    let d = s.dir.path();
    let stat = |k: &str| -> (u64, u64) {
        let summary = d.join(format!("s{k}.json"));
        let out = d.join(format!("r{k}.jsonl"));
        ok(&[
            "analyze", "--corpus", p(&s.corpus), "--vocab", p(&s.vocab), "--model", p(&s.model),
            "--k", k, "--format", "jsonl", "--out", p(&out), "--summary", p(&summary),
        ]);
        let doc: Value = serde_json::from_str(&fs::read_to_string(&summary).unwrap()).unwrap();
        (doc["unique_sequences"].as_u64().unwrap(), doc["run_tokens"].as_u64().unwrap())
    };
    let (uniq1, tokens1) = stat("1");
    let (_, tokens3) = stat("3");
    assert!(uniq1 <= tokens3);
    assert!(tokens1 <= tokens3);
}

#[test]
fn redacted_reports_contain_no_corpus_tokens() {
    let s = staged_canary();
    let out = s.dir.path().join("red.csv");
    ok(&[
        "analyze", "--corpus", p(&s.corpus), "--vocab", p(&s.vocab), "--model", p(&s.model),
        "--redact", "--out", p(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.lines().count() > 1);
    let vocab = Vocabulary::read_from(fs::read(&s.vocab).unwrap().as_slice()).unwrap();
    for t in vocab.tokens() {
        // Every token of this corpus is alphanumeric, so substring checks
        // against the numeric report body are meaningful.
        assert!(!text.contains(t.as_str()), "{t} leaked");
    }
}

#[test]
fn mismatched_vocabulary_fails_before_scanning() {
    let s = staged_canary();
    let small = s.dir.path().join("small.txt");
    ok(&["build-vocab", "--corpus", p(&s.corpus), "--topk", "5", "--out", p(&small)]);
    let out = run(&[
        "analyze", "--corpus", p(&s.corpus), "--vocab", p(&small), "--model", p(&s.model),
        "--out", p(&s.dir.path().join("x.csv")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary mismatch"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let s = staged_canary();
    let d = s.dir.path();
    let cfg = d.join("audit.toml");
    fs::write(
        &cfg,
        format!(
            "corpus = {:?}\nvocab = {:?}\nmodel = {:?}\nk = 3\n\n[analyze]\nfilter = \"unique\"\nformat = \"jsonl\"\n",
            p(&s.corpus),
            p(&s.vocab),
            p(&s.model)
        ),
    )
    .unwrap();
    let from_cfg = d.join("cfg.jsonl");
    ok(&["--config", p(&cfg), "analyze", "--k", "1", "--out", p(&from_cfg)]);
    let from_flags = d.join("flags.jsonl");
    ok(&[
        "analyze", "--corpus", p(&s.corpus), "--vocab", p(&s.vocab), "--model", p(&s.model),
        "--k", "1", "--filter", "unique", "--format", "jsonl", "--out", p(&from_flags),
    ]);
    assert_eq!(fs::read(&from_cfg).unwrap(), fs::read(&from_flags).unwrap());

    // The worker variable sits between flags and the config file.
    fs::write(&cfg, "workers = 0\n").unwrap();
    let out = bin()
        .args(["--config", p(&cfg), "analyze", "--corpus", p(&s.corpus), "--vocab", p(&s.vocab)])
        .args(["--model", p(&s.model), "--out", p(&d.join("w.csv"))])
        .env("TABAUDIT_WORKERS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = bin()
        .args(["analyze", "--corpus", p(&s.corpus), "--vocab", p(&s.vocab)])
        .args(["--model", p(&s.model), "--out", p(&d.join("w.csv"))])
        .env("TABAUDIT_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn epsilon_with_leave_out_ranks_the_canary_first() {
    let s = staged_canary();
    let d = s.dir.path();
    let report = d.join("uniq.csv");
    ok(&[
        "analyze", "--corpus", p(&s.corpus), "--vocab", p(&s.vocab), "--model", p(&s.model),
        "--filter", "unique", "--out", p(&report),
    ]);
    let eps = d.join("eps.json");
    let stdout = ok(&[
        "epsilon", "--report", p(&report), "--corpus", p(&s.corpus), "--vocab", p(&s.vocab),
        "--model", p(&s.model), "--leave-out", "--out", p(&eps),
    ]);
    let doc: Value = serde_json::from_str(&fs::read_to_string(&eps).unwrap()).unwrap();
    assert_eq!(doc["tool_version"], tabaudit::TOOL_VERSION);
    let entries = doc["per_sequence"].as_array().unwrap();
    let best = entries
        .iter()
        .max_by(|a, b| a["log_ratio"].as_f64().unwrap().total_cmp(&b["log_ratio"].as_f64().unwrap()))
        .unwrap();
    assert_eq!(best["sequence"], s.canary.join(" "));
    assert_eq!(doc["epsilon_l"], best["log_ratio"]);
    assert!(stdout.contains(&format!("epsilon_l: {:.2}", best["log_ratio"].as_f64().unwrap())));

    // Public model identical to the private one: zero leakage.
    let same = d.join("same.json");
    let stdout = ok(&[
        "epsilon", "--report", p(&report), "--vocab", p(&s.vocab), "--model", p(&s.model),
        "--public-model", p(&s.model), "--out", p(&same),
    ]);
    assert!(stdout.contains("epsilon_l: 0.00"));
    let doc: Value = serde_json::from_str(&fs::read_to_string(&same).unwrap()).unwrap();
    assert_eq!(doc["epsilon_l"].as_f64(), Some(0.0));
}

#[test]
fn epsilon_without_unique_sequences_reports_none() {
    let s = staged_canary();
    let d = s.dir.path();
    let report = d.join("empty.csv");
    export(&LeakageReport::default(), ReportFormat::Csv, fs::File::create(&report).unwrap()).unwrap();
    let eps = d.join("eps.json");
    let stdout = ok(&[
        "epsilon", "--report", p(&report), "--corpus", p(&s.corpus), "--vocab", p(&s.vocab),
        "--model", p(&s.model), "--leave-out", "--out", p(&eps),
    ]);
    assert!(stdout.contains("epsilon_l: none"));
    let doc: Value = serde_json::from_str(&fs::read_to_string(&eps).unwrap()).unwrap();
    assert!(doc["epsilon_l"].is_null());
    assert_eq!(doc["epsilon_l_display"], "-");
}

#[test]
fn epsilon_reproduces_the_worked_example_through_stub_models() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let (private, public, items) = epsilon_stub_models();
    // Vocabulary whose ids line up with the stub models' ids.
    let tokens: Vec<String> = (0..63).map(|i| format!("x{i}")).collect();
    let vocab = Vocabulary::from_tokens(tokens.clone()).unwrap();
    let vocab_path = d.join("v.txt");
    vocab.write_to(fs::File::create(&vocab_path).unwrap()).unwrap();
    let rows = items
        .iter()
        .map(|it| ReportRow {
            sequence: Seq::Tokens(vocab.decode(&it.sequence)),
            total_in_s: 1,
            user_in_s: 1,
            total_in_d: 1,
            user_in_d: 1,
            contexts: vec![Seq::Tokens(vocab.decode(&it.context))],
            perplexities: vec![1.0],
            public: None,
        })
        .collect();
    let report = LeakageReport {
        rows,
        ..Default::default()
    };
    let report_path = d.join("r.jsonl");
    export(&report, ReportFormat::Jsonl, fs::File::create(&report_path).unwrap()).unwrap();
    let private_path = d.join("private.json");
    let public_path = d.join("public.json");
    StoredModel::from(private).save_path(&private_path).unwrap();
    StoredModel::from(public).save_path(&public_path).unwrap();
    let eps = d.join("eps.json");
    let stdout = ok(&[
        "epsilon", "--report", p(&report_path), "--vocab", p(&vocab_path),
        "--model", p(&private_path), "--public-model", p(&public_path), "--out", p(&eps),
    ]);
    assert!(stdout.contains("epsilon_l: 0.64"), "{stdout}");
    let doc: Value = serde_json::from_str(&fs::read_to_string(&eps).unwrap()).unwrap();
    let ratios: Vec<f64> = doc["per_sequence"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["log_ratio"].as_f64().unwrap())
        .collect();
    let mut want: Vec<f64> = EPSILON_PAIRS.iter().map(|e| e.3).collect();
    let mut got = ratios.clone();
    got.sort_by(f64::total_cmp);
    want.sort_by(f64::total_cmp);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 0.005, "{g} vs {w}");
    }
    assert!((doc["epsilon_l"].as_f64().unwrap() - EPSILON_L).abs() <= 0.005);
}

#[test]
fn commands_are_byte_deterministic() {
    let s = staged_canary();
    let d = s.dir.path();
    let v2 = d.join("v2.txt");
    let m2 = d.join("m2.json");
    ok(&["build-vocab", "--corpus", p(&s.corpus), "--topk", "100000", "--out", p(&v2)]);
    ok(&["train", "--corpus", p(&s.corpus), "--vocab", p(&v2), "--out", p(&m2)]);
    assert_eq!(fs::read(&v2).unwrap(), fs::read(&s.vocab).unwrap());
    assert_eq!(fs::read(&m2).unwrap(), fs::read(&s.model).unwrap());
}
