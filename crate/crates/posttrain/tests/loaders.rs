//! Dataset loaders on a large mixed-validity file.

use posttrain::loaders::{load_pairs, load_sft, parse_sft};

/// Line numbers (1-based) of the malformed records.
const BAD_LINES: [usize; 10] = [3, 97, 150, 151, 400, 512, 640, 777, 901, 1000];

fn sft_line(i: usize) -> String {
    if !BAD_LINES.contains(&i) {
        return serde_json::json!({
            "messages": [
                { "role": "system", "content": "Be brief." },
                { "role": "user", "content": format!("question {i}") },
                { "role": "assistant", "content": format!("answer {i}") },
            ]
        })
        .to_string();
    }
    // A different defect on each bad line.
    match i % 5 {
        0 => "{not json".into(),
        1 => r#"{"messages":[]}"#.into(),
        2 => r#"{"messages":[{"role":"user","content":"no reply"}]}"#.into(),
        3 => r#"{"messages":[{"role":"wizard","content":"x"},{"role":"assistant","content":"y"}]}"#.into(),
        _ => r#"{"text":"wrong schema"}"#.into(),
    }
}

#[test]
fn thousand_records_with_ten_malformed() {
    let text: String = (1..=1000).map(|i| sft_line(i) + "\n").collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sft.jsonl");
    std::fs::write(&path, &text).unwrap();
    let loaded = load_sft(&path).unwrap();
    assert_eq!(loaded.items.len(), 990);
    let lines: Vec<usize> = loaded.diagnostics.iter().map(|d| d.line).collect();
    assert_eq!(lines, BAD_LINES);
    assert_eq!(parse_sft(&text), loaded);
}

#[test]
fn missing_file_is_io_error() {
    let err = load_pairs(std::path::Path::new("/nonexistent/pairs.jsonl")).unwrap_err();
    assert!(matches!(err, posttrain::loaders::LoadError::Io(ref e) if e.is_not_found()), "{err}");
}
