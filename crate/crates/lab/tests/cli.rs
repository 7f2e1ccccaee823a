use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn ethlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ethlab")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn successful_run_writes_output_and_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"experiment": "ward", "N_list": [8], "samples": 2, "seed": 1, "chain": {"k": 1, "points": [[0.0, 1.0]]}});
    let cfg = write_config(dir.path(), "ward.json", &cfg.to_string());
    let out = dir.path().join("ward.csv");
    let o = ethlab(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("\nexperiment,n,sample,statistic,"));
    assert!(stderr(&o).contains("PASS ward"));
}

#[test]
fn config_errors_exit_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = "{\n  \"experiment\": \"ward\",\n  \"N_list\": [8],\n  \"samples\": 0,\n  \"seed\": 1\n}\n";
    let cfg = write_config(dir.path(), "bad.json", text);
    let o = ethlab(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));

    let text = "{\n  \"experiment\": \"ward\",\n  \"N_list\": [8],\n  \"samples\": 1,\n  \"seed\": 1,\n  \"bogus\": 3\n}\n";
    let cfg = write_config(dir.path(), "unknown.json", text);
    let o = ethlab(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 6"), "{}", stderr(&o));
}

#[test]
fn subcommand_must_match_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"experiment": "ward", "N_list": [8], "samples": 1, "seed": 1});
    let cfg = write_config(dir.path(), "ward.json", &cfg.to_string());
    assert_eq!(ethlab(&["eth", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(ethlab(&["run", "--config", "/nonexistent.json"]).status.code(), Some(2));
}

#[test]
fn failed_assertion_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "experiment": "global-law", "N_list": [16], "samples": 4, "seed": 1,
        "chain": {"k": 1, "points": [[0.0, 3.0]]}, "assertions": {"xi": -5.0}
    });
    let cfg = write_config(dir.path(), "global.json", &cfg.to_string());
    let o = ethlab(&["global", "--config", &cfg, "--format", "jsonl"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("FAIL "));
    let first = String::from_utf8(o.stdout).unwrap();
    let head: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(head["checks"][0]["pass"], json!(false));
}

#[test]
fn numerical_abort_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "experiment": "gft-compare", "N_list": [8], "samples": 1, "seed": 1,
        "chain": {"k": 1, "points": [[0.0, 1.0]]},
        "gft": {"mismatch": {"m02": [1.5, 0.0], "m03": [0.0, 0.0], "m12": [0.0, 0.0]}}
    });
    let cfg = write_config(dir.path(), "gft.json", &cfg.to_string());
    let o = ethlab(&["gft", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn seed_override_changes_rows_but_not_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"experiment": "local-law", "N_list": [8], "samples": 2, "seed": 1, "chain": {"k": 1, "points": [[0.0, 1.0]]}});
    let cfg = write_config(dir.path(), "local.json", &cfg.to_string());
    let a = ethlab(&["local-law", "--config", &cfg]);
    let b = ethlab(&["local-law", "--config", &cfg, "--seed", "2"]);
    let c = ethlab(&["local-law", "--config", &cfg, "--threads", "auto"]);
    assert_ne!(a.stdout, b.stdout);
    assert_eq!(a.stdout, c.stdout);
}

#[test]
fn mcalc_prints_the_k1_value() {
    let o = ethlab(&["mcalc", "--z", "0,1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let fields: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|s| s.parse().unwrap()).collect();
    // m(i) = i (√5 - 1) / 2
    let m = (5f64.sqrt() - 1.0) / 2.0;
    assert!(fields[0].abs() < 1e-14);
    assert!((fields[1] - m).abs() < 1e-14);
    assert_eq!(ethlab(&["mcalc", "--z", "0,1", "--imag", "2"]).status.code(), Some(2));
    assert_eq!(ethlab(&["mcalc", "--z", "0.5,0"]).status.code(), Some(2));
}

#[test]
fn moments_prints_a_normalized_law() {
    let o = ethlab(&["moments", "--m02", "0.2,0", "--m03", "0.1,0.05", "--m12", "0.1,0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let total: f64 = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let o = ethlab(&["moments", "--m02", "0.2,0", "--m03", "0,0", "--m12", "0,0", "--gamma", "0.3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn quantiles_are_increasing_and_reflect() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("q.csv");
    let o = ethlab(&["quantiles", "--n", "9", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let g: Vec<f64> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(g.len(), 9);
    assert!(g.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(g[8], 2.0);
    for i in 1..8 {
        assert!((g[i - 1] + g[8 - i]).abs() < 1e-12);
    }
}
