use std::collections::BTreeMap;

use ptp::report::{canonical_json, percent, read_report, to_csv, write_report, FailureRow, Report, ReportRow};

fn row(method: &str, acc: f64) -> ReportRow {
    ReportRow {
        dataset: "tiny".into(),
        method: method.into(),
        mode: "bi".into(),
        shots: 4,
        k: Some(3),
        lambda: Some(0.5),
        seeds: vec![0, 1],
        acc_mean: acc,
        acc_per_seed: vec![acc, acc],
        acc_per_class: BTreeMap::from([("zeta".to_string(), Some(1.0)), ("alpha".to_string(), None)]),
        params: 1234,
        wall_ms: 17,
    }
}

#[test]
fn json_keys_are_sorted_and_complete() {
    let report = Report {
        rows: vec![row("ptp", 0.5)],
        failures: Vec::new(),
    };
    let text = canonical_json(&report);
    assert!(text.ends_with('\n'));
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(value.get("failures").is_none());
    let obj = value["rows"][0].as_object().unwrap();
    let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    let mut expected = vec![
        "K", "acc_mean", "acc_per_class", "acc_per_seed", "dataset", "lambda", "method", "mode", "params", "seeds",
        "shots", "wall_ms",
    ];
    expected.sort();
    assert_eq!(keys, expected);
    // Sorted keys in the text itself, not only in the parsed map.
    let a = text.find("\"acc_mean\"").unwrap();
    let w = text.find("\"wall_ms\"").unwrap();
    assert!(a < w);
    assert!(text.find("\"alpha\"").unwrap() < text.find("\"zeta\"").unwrap());
    assert!(obj["acc_per_class"]["alpha"].is_null());
}

#[test]
fn csv_shows_two_decimal_percentages() {
    assert_eq!(percent(0.8766), "87.66");
    assert_eq!(percent(1.0), "100.00");
    let csv = to_csv(&Report {
        rows: vec![row("ptp", 0.123456), row("vm", 1.0)],
        failures: Vec::new(),
    });
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("dataset,method,mode,shots,K,lambda"));
    assert!(lines[1].contains(",12.35,"), "{}", lines[1]);
    assert!(lines[2].contains(",100.00,100.00;100.00,"), "{}", lines[2]);
}

#[test]
fn written_report_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let report = Report {
        rows: vec![row("sp", 0.25)],
        failures: vec![FailureRow {
            method: "ptp".into(),
            shots: 4,
            k: Some(3),
            lambda: Some(1.0),
            seed: Some(2),
            error: "numeric".into(),
        }],
    };
    write_report(dir.path(), &report).unwrap();
    assert_eq!(read_report(&dir.path().join("report.json")).unwrap(), report);
    assert!(dir.path().join("report.csv").is_file());
}
