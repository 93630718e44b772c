use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ptp::report::{read_report, Report};

const QUICK: &[&str] = &["--epochs", "2", "--m", "2", "--seeds", "0"];

fn ptp(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ptp"));
    cmd.args(args).env_remove("PTP_SEED");
    if let Some(s) = env_seed {
        cmd.env("PTP_SEED", s);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = ptp(args, None);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report(dir: &Path) -> Report {
    read_report(&dir.join("report.json")).unwrap()
}

fn without_wall(dir: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    for row in v["rows"].as_array_mut().unwrap() {
        row.as_object_mut().unwrap().remove("wall_ms");
    }
    v
}

#[test]
fn gen_data_then_train_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("tiny");
    let out = tmp.path().join("run");
    ok(&["gen-data", "--preset", "tiny", "--text", "--out", path(&data)]);
    for f in ["train.ptpe", "train.json", "test.ptpe", "test.json", "text.ptpe", "text.json", "clusters.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let mut args = vec!["train", "--data", path(&data), "--shots", "2", "--k", "2", "--out", path(&out)];
    args.extend_from_slice(QUICK);
    ok(&args);
    let r = report(&out);
    assert_eq!(r.rows.len(), 1);
    let row = &r.rows[0];
    assert_eq!((row.dataset.as_str(), row.method.as_str(), row.k), ("tiny", "ptp", Some(2)));
    assert!((0.0..=1.0).contains(&row.acc_mean));
    assert_eq!(fs::read_to_string(out.join("trace.jsonl")).unwrap().lines().count(), 2);
    assert!(out.join("checkpoints/seed-0/checkpoint.json").is_file());
    assert!(out.join("report.csv").is_file());
}

#[test]
fn train_then_eval_reproduces_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, e) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("e"));
    for out in [&a, &b] {
        ok(&["train", "--preset", "tiny", "--shots", "2", "--epochs", "3", "--m", "2", "--seeds", "0,1", "--out", path(out)]);
    }
    assert_eq!(without_wall(&a), without_wall(&b));
    for f in ["trace.jsonl", "predictions.jsonl", "checkpoints/seed-1/image_prototypes.ptpe"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    ok(&["eval", "--preset", "tiny", "--checkpoints", path(&a), "--out", path(&e)]);
    assert_eq!(without_wall(&a), without_wall(&e));
    assert_eq!(fs::read(a.join("predictions.jsonl")).unwrap(), fs::read(e.join("predictions.jsonl")).unwrap());
}

#[test]
fn sp_matches_single_unregularized_prototype_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let (sp, k1) = (tmp.path().join("sp"), tmp.path().join("k1"));
    let common = ["--preset", "tiny", "--shots", "2", "--epochs", "3", "--m", "2", "--seeds", "0,1"];
    let mut a = vec!["train", "--method", "sp", "--out", path(&sp)];
    a.extend_from_slice(&common);
    ok(&a);
    let mut b = vec!["train", "--method", "ptp", "--k", "1", "--lambda", "0", "--out", path(&k1)];
    b.extend_from_slice(&common);
    ok(&b);
    for f in ["trace.jsonl", "predictions.jsonl"] {
        assert_eq!(fs::read(sp.join(f)).unwrap(), fs::read(k1.join(f)).unwrap(), "{f}");
    }
    let (rs, rk) = (report(&sp), report(&k1));
    assert_eq!(rs.rows[0].acc_per_seed, rk.rows[0].acc_per_seed);
}

#[test]
fn baselines_train_and_mcp_evaluates_without_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    for method in ["vm", "lp", "mcp"] {
        let out = tmp.path().join(method);
        ok(&["train", "--preset", "tiny", "--method", method, "--shots", "2", "--epochs", "2", "--seeds", "0", "--out", path(&out)]);
        let r = report(&out);
        assert_eq!(r.rows[0].method, method);
        assert_eq!(r.rows[0].k, None);
    }
    let out = tmp.path().join("eval-mcp");
    ok(&["eval", "--preset", "tiny", "--out", path(&out)]);
    let mcp = report(&out).rows.remove(0);
    assert_eq!(mcp.params, 0);
    assert_eq!(mcp.acc_mean, report(&tmp.path().join("mcp")).rows[0].acc_mean);
    assert_eq!(ptp(&["eval", "--preset", "tiny", "--method", "vm", "--out", path(&out)], None).status.code(), Some(2));
}

#[test]
fn sweep_emits_rows_in_grid_order() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    ok(&[
        "sweep", "--preset", "tiny", "--shots", "1,2", "--k", "1,2", "--lambda", "0,0.5,1", "--epochs", "1", "--m", "1",
        "--seeds", "0", "--jobs", "2", "--out", path(&out),
    ]);
    let r = report(&out);
    assert_eq!(r.rows.len(), 12);
    let mut expected = Vec::new();
    for s in [1, 2] {
        for k in [1, 2] {
            for l in [0.0, 0.5, 1.0] {
                expected.push((s, Some(k), Some(l)));
            }
        }
    }
    let got: Vec<_> = r.rows.iter().map(|r| (r.shots, r.k, r.lambda)).collect();
    assert_eq!(got, expected);
    assert!(r.failures.is_empty());
    assert_eq!(ptp(&["sweep", "--preset", "tiny", "--method", "vm", "--out", path(&out)], None).status.code(), Some(2));
}

#[test]
fn settings_layer_defaults_config_env_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    fs::write(&config, r#"{"preset": "tiny", "shots": 2, "K": 3, "epochs": 1, "m": 1, "seeds": [4]}"#).unwrap();
    let seeds_of = |args: &[&str], env: Option<&str>| {
        let out = tmp.path().join("layer");
        let mut full = vec!["train", "--config", path(&config), "--out", path(&out)];
        full.extend_from_slice(args);
        let o = ptp(&full, env);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let row = report(&out).rows.remove(0);
        (row.seeds, row.k, row.lambda, row.shots)
    };
    // Config over defaults; lambda keeps its default.
    assert_eq!(seeds_of(&[], None), (vec![4], Some(3), Some(1.0), 2));
    // The environment beats the config for seeds.
    assert_eq!(seeds_of(&[], Some("5,6")).0, vec![5, 6]);
    // Flags beat both.
    assert_eq!(seeds_of(&["--seeds", "7", "--k", "1"], Some("5")), (vec![7], Some(1), Some(1.0), 2));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let config = tmp.path().join("bad.json");
    fs::write(&config, r#"{"preset": "tiny", "temperature": 1.0}"#).unwrap();
    let o = ptp(&["train", "--config", path(&config), "--out", path(&out)], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("temperature"));

    let o = ptp(&["train", "--preset", "tiny", "--lamda", "1", "--out", path(&out)], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--lambda"));

    for args in [
        &["train", "--preset", "tiny", "--method", "zsl", "--out", path(&out)][..],
        &["train", "--preset", "tiny", "--k", "0", "--out", path(&out)],
        &["train", "--out", path(&out)],
    ] {
        assert_eq!(ptp(args, None).status.code(), Some(2), "{args:?}");
    }
    assert_eq!(ptp(&["train", "--preset", "tiny", "--out", path(&out)], Some("x")).status.code(), Some(2));
}

#[test]
fn data_numeric_and_io_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    ok(&["gen-data", "--preset", "tiny", "--out", path(&data)]);

    let o = ptp(&["train", "--preset", "tiny", "--lr", "1e200", "--shots", "2", "--epochs", "2", "--m", "1", "--seeds", "0", "--out", path(&out)], None);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!report(&out).failures.is_empty());

    let missing = tmp.path().join("nowhere");
    assert_eq!(ptp(&["train", "--data", path(&missing), "--out", path(&out)], None).status.code(), Some(5));

    let mut bytes = fs::read(data.join("train.ptpe")).unwrap();
    bytes[0] ^= 0xff;
    fs::write(data.join("train.ptpe"), bytes).unwrap();
    assert_eq!(ptp(&["train", "--data", path(&data), "--out", path(&out)], None).status.code(), Some(3));
}

#[test]
fn help_lists_defaults_and_fixed_settings() {
    let o = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for needle in ["[default: 5]", "[default: 1.0]", "[default: 16]", "[default: 3e-3]", "[default: 32]", "0,1,2", "0.01", "AdamW", "PTP_SEED"] {
        assert!(text.contains(needle), "missing {needle}");
    }
    let o = ok(&["sweep", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("3,5,7") && text.contains("0,0.5,1,2"));
}

#[test]
fn export_report_merges_inputs_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, m) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("m"));
    ok(&["train", "--preset", "tiny", "--method", "vm", "--shots", "1", "--seeds", "0", "--out", path(&a)]);
    ok(&["eval", "--preset", "tiny", "--out", path(&b)]);
    ok(&["export-report", "--input", path(&a.join("report.json")), path(&b.join("report.json")), "--out", path(&m)]);
    let methods: Vec<String> = report(&m).rows.into_iter().map(|r| r.method).collect();
    assert_eq!(methods, ["vm", "mcp"]);
    assert_eq!(fs::read_to_string(m.join("report.csv")).unwrap().lines().count(), 3);
}
