//! End-to-end runs of the `specrl` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn specrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specrl")).args(args).output().expect("binary runs")
}

fn default_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn train(dir: &Path, scenario: &str, seed: u64, steps: usize) -> Value {
    let out = specrl(&[
        "train",
        "--config",
        path_str(&default_config()),
        "--seed",
        &seed.to_string(),
        "--steps",
        &steps.to_string(),
        "--scenario",
        scenario,
        "--out",
        path_str(dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    read_json(&dir.join("summary.json"))
}

#[test]
fn profile_writes_full_table_reproducibly() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = specrl(&["profile", "--config", path_str(&default_config()), "--seed", "0", "--out", path_str(dir)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let csv = fs::read_to_string(a.join("profile.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("profile.csv")).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "batch,s,t,n,speedup");
    assert_eq!(lines.len(), 1 + 7 * 19);

    // The fastest row per batch in the CSV is the configuration the table picks.
    let table = read_json(&a.join("profile.json"));
    let buckets: Vec<u64> = table["buckets"].as_array().unwrap().iter().map(|b| b.as_u64().unwrap()).collect();
    for (i, bucket) in buckets.iter().enumerate() {
        let mut best: Option<(f64, String)> = None;
        for line in &lines[1..] {
            let f: Vec<&str> = line.split(',').collect();
            if f[0].parse::<u64>().unwrap() != *bucket {
                continue;
            }
            let speedup: f64 = f[4].parse().unwrap();
            let label = if f[1] == "0" { "off".to_string() } else { format!("s{}t{}n{}", f[1], f[2], f[3]) };
            if best.as_ref().is_none_or(|(s, _)| speedup > *s) {
                best = Some((speedup, label));
            }
        }
        let pick = &table["best"][i];
        let pick_label = if pick["enabled"].as_bool().unwrap() {
            format!("s{}t{}n{}", pick["rounds"], pick["branching"], pick["draft_len"])
        } else {
            "off".to_string()
        };
        assert_eq!(best.unwrap().1, pick_label, "bucket {bucket}");
    }
}

#[test]
fn verify_passes_and_catches_a_mutated_rule() {
    let out = specrl(&["verify", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let out = specrl(&["verify", "--seed", "0", "--mutate-epsilon", "0.05"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty.json");
    fs::write(&empty, "").unwrap();
    let out_dir = tmp.path().join("out");
    let out = specrl(&["profile", "--config", path_str(&empty), "--seed", "0", "--out", path_str(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));

    let out = specrl(&["train", "--seed", "0", "--scenario", "nonsense", "--out", path_str(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));

    let unknown = tmp.path().join("unknown.json");
    fs::write(&unknown, r#"{"no_such_field": 1}"#).unwrap();
    let out = specrl(&["train", "--config", path_str(&unknown), "--seed", "0", "--out", path_str(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));

    let out = specrl(&["train", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn train_writes_metrics_deterministically() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let summary = train(&a, "respec", 3, 6);
    train(&b, "respec", 3, 6);
    for file in ["summary.json", "respec/steps.jsonl", "respec/learner.jsonl", "respec/switches.jsonl", "respec/cycles.jsonl"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let steps = fs::read_to_string(a.join("respec/steps.jsonl")).unwrap();
    assert_eq!(steps.lines().count(), 6);
    assert_eq!(summary["runs"][0]["steps"], 6);
}

#[test]
fn respec_beats_baseline_on_simulated_time() {
    let tmp = TempDir::new().unwrap();
    for seed in 0..3 {
        let base = train(&tmp.path().join(format!("base{seed}")), "baseline", seed, 20);
        let respec = train(&tmp.path().join(format!("respec{seed}")), "respec", seed, 20);
        let (tb, tr) = (base["runs"][0]["total_time"].as_f64().unwrap(), respec["runs"][0]["total_time"].as_f64().unwrap());
        assert!(tr < tb, "seed {seed}: respec {tr} vs baseline {tb}");
    }
}
