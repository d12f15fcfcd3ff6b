mod common;

use tabaudit::extractor::{extract_runs, ExtractionConfig};
use tabaudit::stats::{
    aggregate_runs, build_report, count_in_corpus, export, filter_singleton, filter_unique,
    import, ReportFormat, Seq,
};

use common::*;

#[test]
fn leakage_example_row_and_exact_layouts() {
    let (corpus, model) = table1_fixture();
    let runs = extract_runs(&model, &corpus, &ExtractionConfig::default()).unwrap();
    let groups = aggregate_runs(&runs);
    assert_eq!(groups.len(), 1);
    assert_eq!((groups[0].total_in_s, groups[0].user_in_s), (2, 1));

    let report = build_report(&runs, &corpus, &model, false).unwrap();
    let csv = String::from_utf8(report_bytes(&report, ReportFormat::Csv)).unwrap();
    assert_eq!(
        csv,
        "sequence,total_in_S,user_in_S,total_in_D,user_in_D,contexts,perplexities\n\
         very much,2,1,10,5,\"[\"\"Thank you\"\", \"\"I like cats\"\"]\",\"[1.30, 3.60]\"\n"
    );

    let redacted = build_report(&runs, &corpus, &model, true).unwrap();
    let csv = String::from_utf8(report_bytes(&redacted, ReportFormat::Csv)).unwrap();
    assert_eq!(
        csv,
        "sequence,total_in_S,user_in_S,total_in_D,user_in_D,contexts,perplexities\n\
         2,2,1,10,5,\"[2, 3]\",\"[1.30, 3.60]\"\n"
    );
    let back = import(ReportFormat::Csv, csv.as_bytes()).unwrap();
    assert!(back.redacted);
    assert_eq!(back.rows[0].sequence, Seq::Length(2));
    assert_eq!(back.rows[0].contexts, vec![Seq::Length(2), Seq::Length(3)]);

    // Not unique (five users) and not a singleton.
    assert!(filter_unique(&report).rows.is_empty());
    assert!(filter_singleton(&report).rows.is_empty());
}

#[test]
fn jsonl_round_trip_is_exact() {
    let (corpus, model) = table1_fixture();
    let runs = extract_runs(&model, &corpus, &ExtractionConfig::default()).unwrap();
    let report = build_report(&runs, &corpus, &model, false).unwrap();
    let mut buf = Vec::new();
    let n = export(&report, ReportFormat::Jsonl, &mut buf).unwrap();
    assert_eq!(n as usize, buf.len());
    let back = import(ReportFormat::Jsonl, buf.as_slice()).unwrap();
    assert_eq!(back.rows, report.rows);
    assert_eq!(back.rows[0].perplexities[0], report.rows[0].perplexities[0]);
}

#[test]
fn rows_sort_longest_first() {
    let mut rng = rng(17);
    let corpus = random_corpus(&mut rng, 20, 40, 8, 8, 4);
    let model = tabaudit::lm::train_ngram(&corpus, 3, &tabaudit::lm::DEFAULT_LAMBDAS).unwrap();
    let runs = extract_runs(&model, &corpus, &ExtractionConfig::default()).unwrap();
    let report = build_report(&runs, &corpus, &model, false).unwrap();
    assert!(report.rows.len() > 2);
    for w in report.rows.windows(2) {
        let (a, b) = (&w[0].sequence, &w[1].sequence);
        assert!(a.len() > b.len() || (a.len() == b.len() && a < b));
    }
    assert_eq!(
        report.rows.iter().map(|r| r.total_in_s).sum::<usize>(),
        runs.len()
    );
}

#[test]
fn counting_handles_overlap_and_document_boundaries() {
    let corpus = encode_all(vec![
        doc("u1", "1", &["a", "a", "a", "b"]),
        doc("u1", "2", &["a"]),
        doc("u2", "1", &["a", "b", "a", "a"]),
    ]);
    let id = |t: &str| corpus.vocab().get(t).unwrap();
    let (a, b) = (id("a"), id("b"));
    let counts = count_in_corpus(&[vec![a, a], vec![b, a], vec![a, b, a], vec![b, a, a, a]], &corpus);
    let got: Vec<(usize, usize)> = counts.iter().map(|c| (c.total_in_d, c.user_in_d)).collect();
    // "a a" overlaps twice in the first doc; "b a" never spans doc 1 → doc 2.
    assert_eq!(got, [(3, 2), (1, 1), (1, 1), (0, 0)]);
}
