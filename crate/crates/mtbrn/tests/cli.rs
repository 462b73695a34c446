use std::path::Path;
use std::process::{Command, Output};

use mtbrn::commands::{extract_parallel, load_extraction_input};
use mtbrn::manifest::RunManifest;
use mtbrn_core::pathfinder::ExtractConfig;
use serde_json::Value;
use tempfile::TempDir;

fn mtbrn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtbrn")).args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mtbrn(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no JSON on stderr: {text}"));
    serde_json::from_str(line).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_WORLD: [&str; 8] = ["--n-users", "40", "--n-items", "60", "--impressions-per-user", "36", "--seed", "3"];

/// A small world with its split and both path files.
fn small_pipeline(dir: &Path, threads: &str) {
    let mut args = vec!["gen-synth", "--out", "world"];
    args.extend(SMALL_WORLD);
    ok(dir, &args);
    ok(dir, &["build-simgraph", "--interactions", "world/interactions.tsv", "--profiles", "world/profiles.tsv", "--out", "data"]);
    for split in ["train", "test"] {
        let (inst, out) = (format!("data/{split}.jsonl"), format!("paths/{split}.jsonl"));
        ok(dir, &[
            "extract-paths", "--simgraph", "data/simgraph.tsv", "--triples", "world/triples.tsv", "--profiles",
            "world/profiles.tsv", "--instances", &inst, "--out", &out, "--threads", threads,
        ]);
    }
}

#[test]
fn help_and_version_exit_zero() {
    let dir = TempDir::new().unwrap();
    let out = mtbrn(dir.path(), &["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-synth", "build-simgraph", "extract-paths", "train", "evaluate", "analyze-paths", "grad-check"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    assert!(mtbrn(dir.path(), &["train", "--help"]).status.success());
    assert!(mtbrn(dir.path(), &["--version"]).status.success());
}

#[test]
fn usage_errors_are_json_with_exit_two() {
    let dir = TempDir::new().unwrap();
    for args in [
        vec!["train", "--bogus"],
        vec!["frobnicate"],
        vec!["grad-check", "--variant", "nonsense"],
        vec!["evaluate", "--checkpoint", "c.json"],
    ] {
        let out = mtbrn(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(stderr_json(&out)["error"]["kind"], "usage", "{args:?}");
    }
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let out = mtbrn(dir.path(), &["build-simgraph", "--interactions", "nope.tsv", "--profiles", "nope2.tsv", "--out", "d"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "io");
    assert!(err["error"]["path"].as_str().unwrap().starts_with("nope"));
}

#[test]
fn malformed_input_names_line_and_field() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("log.tsv"), "u1\ti1\t1\t1\nu1\ti2\tlater\t0\n").unwrap();
    std::fs::write(dir.path().join("profiles.tsv"), "").unwrap();
    let out = mtbrn(dir.path(), &["build-simgraph", "--interactions", "log.tsv", "--profiles", "profiles.tsv", "--out", "d"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "schema");
    assert_eq!(err["error"]["line"], 2);
    assert_eq!(err["error"]["field"], 3);
}

#[test]
fn flags_override_config_with_a_warning() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("c.toml"), "seed = 11\nstep = 1e-5\n").unwrap();
    let out = mtbrn(dir.path(), &["grad-check", "--config", "c.toml", "--seed", "12", "--out", "gc.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning:") && stderr.contains("--seed") && stderr.contains("c.toml"), "{stderr}");
    let manifest = read_json(&dir.path().join("gc.manifest.json"));
    assert_eq!(manifest["seed"], 12);

    std::fs::write(dir.path().join("bad.toml"), "seed = 1\nnot_a_key = 2\n").unwrap();
    let out = mtbrn(dir.path(), &["grad-check", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["kind"], "config");
}

#[test]
fn conflicting_settings_name_both_sources() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("c.toml"), "max_path_len = 5\n").unwrap();
    for f in ["s.tsv", "t.tsv", "p.tsv", "i.jsonl"] {
        std::fs::write(dir.path().join(f), "").unwrap();
    }
    let out = mtbrn(dir.path(), &[
        "extract-paths", "--config", "c.toml", "--max-hops-cf", "3", "--simgraph", "s.tsv", "--triples", "t.tsv",
        "--profiles", "p.tsv", "--instances", "i.jsonl", "--out", "o.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    let msg = err["error"]["message"].as_str().unwrap();
    assert!(msg.contains("--max-hops-cf") && msg.contains("c.toml"), "{msg}");
}

#[test]
fn grad_check_reports_pass() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(dir.path(), &["grad-check", "--variant", "no_fusion", "--seed", "4", "--out", "gc.json"]);
    assert!(stdout.contains("PASS"), "{stdout}");
    let report = read_json(&dir.path().join("gc.json"));
    assert!(report["max_rel_error"].as_f64().unwrap() <= 1e-4);
    // an unreachable tolerance fails with exit code 1 instead of being loosened
    let out = mtbrn(dir.path(), &["grad-check", "--tolerance", "1e-300", "--out", "gc2.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn pipeline_end_to_end_and_rerun_is_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for (dir, threads) in [(a.path(), "3"), (b.path(), "1")] {
        small_pipeline(dir, threads);
        ok(dir, &[
            "train", "--instances", "data/train.jsonl", "--paths", "paths/train.jsonl", "--out", "model", "--epochs", "2",
        ]);
        ok(dir, &[
            "evaluate", "--checkpoint", "model/checkpoint.json", "--instances", "data/test.jsonl", "--paths",
            "paths/test.jsonl", "--out", "eval.json", "--ground-truth", "world/ground_truth.tsv", "--predictions",
            "pred.csv",
        ]);
        ok(dir, &[
            "evaluate", "--checkpoint", "model/checkpoint.json", "--instances", "data/test.jsonl", "--paths",
            "paths/test.jsonl", "--out", "eval.csv", "--format", "csv",
        ]);
        ok(dir, &["analyze-paths", "--instances", "data/test.jsonl", "--paths", "paths/test.jsonl", "--out", "analysis"]);
    }

    let report = read_json(&a.path().join("eval.json"));
    for key in ["variant", "auc", "logloss", "n_pos", "n_neg", "bayes_auc"] {
        assert!(!report[key].is_null(), "{key} missing");
    }
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    let csv = std::fs::read_to_string(a.path().join("eval.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("auc"));
    let preds = std::fs::read_to_string(a.path().join("pred.csv")).unwrap();
    let n = report["n_pos"].as_u64().unwrap() + report["n_neg"].as_u64().unwrap();
    assert_eq!(preds.lines().count() as u64, n + 1);
    assert_eq!(preds.lines().next().unwrap(), "instance_idx,prediction,label");
    let log = std::fs::read_to_string(a.path().join("model/loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);

    for m in [
        "world/manifest.json",
        "data/manifest.json",
        "paths/train.manifest.json",
        "paths/test.manifest.json",
        "model/manifest.json",
        "eval.manifest.json",
        "eval.csv",
        "analysis/manifest.json",
    ] {
        if m.ends_with(".csv") {
            assert_eq!(std::fs::read(a.path().join(m)).unwrap(), std::fs::read(b.path().join(m)).unwrap(), "{m}");
            continue;
        }
        let ma = RunManifest::load(&a.path().join(m)).unwrap();
        let mb = RunManifest::load(&b.path().join(m)).unwrap();
        assert!(ma.same_run(&mb), "{m} differs");
        assert!(!ma.outputs.is_empty(), "{m} lists no outputs");
    }
}

#[test]
fn extraction_is_identical_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    small_pipeline(dir.path(), "1");
    let d = dir.path();
    let input = load_extraction_input(
        &d.join("data/simgraph.tsv"),
        &d.join("world/triples.tsv"),
        &d.join("world/profiles.tsv"),
        &d.join("data/train.jsonl"),
    )
    .unwrap();
    let config = ExtractConfig { max_hops_cf: 3, max_hops_kg: 3, k_cf: 10, k_kg: 10, max_path_len: 7 };
    let one = extract_parallel(&input, &config, 1);
    assert_eq!(one.len(), input.instances.len());
    assert!(one.iter().any(|s| s.total() > 0));
    for threads in [2, 3, 4, 7, 64] {
        assert_eq!(extract_parallel(&input, &config, threads), one, "threads = {threads}");
    }
}
