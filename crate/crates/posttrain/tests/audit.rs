//! Contamination index against a brute-force oracle, normalization
//! properties, the planted-overlap fixture and the language fixture.

mod common;

use posttrain::audit::lang::{language_distribution, Detector, HeuristicDetector};
use posttrain::audit::{audit_report, contamination, load_corpus, normalize, Doc, FieldMap, IndexMode, NgramIndex};
use proptest::prelude::*;

fn docs(texts: &[String]) -> Vec<Doc> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| Doc {
            id: i.to_string(),
            text: t.clone(),
        })
        .collect()
}

fn indexed(train: &[String], n: usize, mode: IndexMode) -> NgramIndex {
    let mut index = NgramIndex::new(n, mode).unwrap();
    for t in train {
        index.insert_doc(t);
    }
    index
}

proptest! {
    #[test]
    fn normalize_is_idempotent(text in "\\PC{0,80}") {
        let once = normalize(&text);
        prop_assert_eq!(normalize(&once.join(" ")), once);
    }

    #[test]
    fn index_matches_brute_force(seed in any::<u64>(), n in 1usize..6, vocab in 3usize..40) {
        let mut r = common::rng(seed);
        let train = common::random_docs(&mut r, 60, vocab, 12);
        let bench = common::random_docs(&mut r, 30, vocab, 12);
        let expected = common::oracle_contaminated(&train, &bench, n);
        for mode in [IndexMode::Exact, IndexMode::Hashed] {
            let row = contamination(&indexed(&train, n, mode), "b", &docs(&bench)).unwrap();
            prop_assert_eq!(row.contaminated, expected);
        }
    }

    #[test]
    fn contamination_is_monotone_in_n(seed in any::<u64>(), vocab in 3usize..20) {
        let mut r = common::rng(seed);
        let train = common::random_docs(&mut r, 40, vocab, 10);
        let bench = common::random_docs(&mut r, 30, vocab, 10);
        let counts: Vec<usize> = (1..8)
            .map(|n| contamination(&indexed(&train, n, IndexMode::Exact), "b", &docs(&bench)).unwrap().contaminated)
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{:?}", counts);
    }

    #[test]
    fn benchmark_subset_of_train_is_fully_contaminated(seed in any::<u64>(), n in 1usize..10) {
        let mut r = common::rng(seed);
        let train = common::random_docs(&mut r, 50, 100, 15);
        let bench: Vec<String> = train.iter().step_by(3).cloned().collect();
        let row = contamination(&indexed(&train, n, IndexMode::Hashed), "b", &docs(&bench)).unwrap();
        prop_assert_eq!(row.percent, "100.00");
    }
}

#[test]
fn normalization_examples() {
    assert_eq!(normalize("Hello,  WORLD!!"), ["hello", "world"]);
    // Decomposed é (e + U+0301) normalizes to the precomposed form.
    assert_eq!(normalize("Cafe\u{301} au lait"), normalize("Café au lait"));
    assert_eq!(normalize("ÀB"), ["àb"]);
}

#[test]
fn planted_fixture_reports_two_percent() {
    let dir = tempfile::tempdir().unwrap();
    let (train, bench) = common::planted_overlap(dir.path());
    for mode in [IndexMode::Exact, IndexMode::Hashed] {
        let report = audit_report(std::slice::from_ref(&train), std::slice::from_ref(&bench), 8, mode, &FieldMap::default(), &FieldMap::default()).unwrap();
        assert_eq!(report.rows[0].contaminated, 1);
        assert_eq!(report.rows[0].percent, "2.00");
        assert!(report.render_text().trim_end().ends_with("2.00%"));
    }
    // With 9-grams the 8-word leak no longer matches.
    let report = audit_report(&[train], &[bench], 9, IndexMode::Exact, &FieldMap::default(), &FieldMap::default()).unwrap();
    assert_eq!(report.rows[0].percent, "0.00");
}

#[test]
fn disjoint_corpora_report_zero() {
    let mut r = common::rng(5);
    let train = common::random_docs(&mut r, 100, 50, 20);
    let bench: Vec<String> = common::random_docs(&mut r, 40, 50, 20).iter().map(|d| d.replace('v', "u")).collect();
    assert!(common::vocabulary(&train).is_disjoint(&common::vocabulary(&bench)));
    let row = contamination(&indexed(&train, 1, IndexMode::Hashed), "b", &docs(&bench)).unwrap();
    assert_eq!(row.percent, "0.00");
}

#[test]
fn language_fixture_agreement_at_least_ninety_percent() {
    let path = common::fixture("languages.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let labelled: Vec<(String, String)> = text
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["lang"].as_str().unwrap().to_string(), v["text"].as_str().unwrap().to_string())
        })
        .collect();
    assert_eq!(labelled.len(), 200);
    let detector = HeuristicDetector::default();
    let agree = labelled.iter().filter(|(lang, t)| detector.classify(t) == *lang).count();
    assert!(agree >= 180, "agreement {agree}/200");

    let corpus = load_corpus(&path, &FieldMap::default()).unwrap();
    let shares = language_distribution(corpus.iter().map(|d| d.text.as_str()), &detector);
    assert_eq!(shares.iter().map(|s| s.count).sum::<usize>(), 200);
    assert!(shares.windows(2).all(|w| w[0].count >= w[1].count));
}
