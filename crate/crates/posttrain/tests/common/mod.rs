//! Fixture builders and reference oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use posttrain::audit::normalize;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn write_jsonl(path: &Path, records: &[serde_json::Value]) {
    let body: String = records.iter().map(|r| r.to_string() + "\n").collect();
    std::fs::write(path, body).unwrap();
}

/// Word `k` of document `doc` in namespace `ns`; all distinct.
fn word(ns: &str, doc: usize, k: usize) -> String {
    format!("{ns}{doc}w{k}")
}

fn doc_text(ns: &str, doc: usize, len: usize) -> String {
    (0..len).map(|k| word(ns, doc, k)).collect::<Vec<_>>().join(" ")
}

/// Training corpus of 200 documents and a 50-item benchmark sharing no
/// words, except that benchmark item 17 embeds 8 consecutive words of
/// training document 5: exactly 1/50 = 2.00% contaminated at n = 8.
pub fn planted_overlap(dir: &Path) -> (PathBuf, PathBuf) {
    let train: Vec<_> = (0..200)
        .map(|i| serde_json::json!({ "id": format!("t{i}"), "text": doc_text("train", i, 40) }))
        .collect();
    let bench: Vec<_> = (0..50)
        .map(|i| {
            let mut text = doc_text("bench", i, 30);
            if i == 17 {
                let leaked: Vec<String> = (10..18).map(|k| word("train", 5, k)).collect();
                text = format!("{} {} {}", doc_text("bench", i, 10), leaked.join(" "), doc_text("tail", i, 10));
            }
            serde_json::json!({ "id": format!("b{i}"), "text": text })
        })
        .collect();
    let (t, b) = (dir.join("train.jsonl"), dir.join("planted_bench.jsonl"));
    write_jsonl(&t, &train);
    write_jsonl(&b, &bench);
    (t, b)
}

/// Random documents over a small vocabulary so that n-gram collisions are
/// common.
pub fn random_docs(rng: &mut StdRng, n_docs: usize, vocab: usize, max_len: usize) -> Vec<String> {
    (0..n_docs)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            (0..len).map(|_| format!("v{}", rng.gen_range(0..vocab))).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Brute-force reference: token windows compared element-wise against
/// every window of every training document, no hashing and no index.
pub fn oracle_contaminated(train: &[String], bench: &[String], n: usize) -> usize {
    let windows = |toks: &[String]| -> Vec<Vec<String>> {
        if toks.is_empty() {
            Vec::new()
        } else if toks.len() < n {
            vec![toks.to_vec()]
        } else {
            toks.windows(n).map(<[String]>::to_vec).collect()
        }
    };
    let train_windows: Vec<Vec<Vec<String>>> = train.iter().map(|d| windows(&normalize(d))).collect();
    bench
        .iter()
        .filter(|b| {
            windows(&normalize(b))
                .iter()
                .any(|w| train_windows.iter().any(|doc| doc.iter().any(|tw| tw == w)))
        })
        .count()
}

/// Distinct normalized tokens across `docs`.
pub fn vocabulary(docs: &[String]) -> HashSet<String> {
    docs.iter().flat_map(|d| normalize(d)).collect()
}
