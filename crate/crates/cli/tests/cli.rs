use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: PathBuf,
    model: PathBuf,
    train_stderr: String,
}

fn pathgrad() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pathgrad"));
    c.env_remove("PATHGRAD_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    pathgrad().args(args).output().expect("spawn pathgrad")
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

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.jsonl");
        let model = dir.path().join("model.json");
        ok(&["gen-corpus", "--out", s(&corpus)]);
        let out = run(&["train", "--corpus", s(&corpus), "--out", s(&model)]);
        assert!(out.status.success());
        Fixture {
            train_stderr: String::from_utf8(out.stderr).unwrap(),
            _dir: dir,
            corpus,
            model,
        }
    })
}

fn records(jsonl: &str) -> Vec<Value> {
    jsonl.lines().skip(1).map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn small_corpus(n: usize) -> (tempfile::TempDir, PathBuf) {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.jsonl");
    let text = std::fs::read_to_string(&f.corpus).unwrap();
    let head: Vec<&str> = text.lines().take(n + 1).collect();
    std::fs::write(&path, head.join("\n") + "\n").unwrap();
    (dir, path)
}

#[test]
fn gen_corpus_is_deterministic_and_seed_env_wins() {
    let a = ok(&["gen-corpus", "--size", "1", "--seed", "7"]);
    let b = ok(&["gen-corpus", "--size", "1", "--seed", "7"]);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 2);
    let from_env = pathgrad()
        .args(["gen-corpus", "--size", "20", "--seed", "1"])
        .env("PATHGRAD_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(String::from_utf8(from_env.stdout).unwrap(), ok(&["gen-corpus", "--size", "20", "--seed", "5"]));
    let bad = pathgrad().args(["gen-corpus"]).env("PATHGRAD_SEED", "x").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(bad.stdout.is_empty());
}

#[test]
fn training_reaches_the_accuracy_floor_and_is_reproducible() {
    let f = fixture();
    let acc: f64 = f
        .train_stderr
        .lines()
        .find_map(|l| l.strip_prefix("accuracy "))
        .expect("accuracy line")
        .parse()
        .unwrap();
    assert!(acc >= 0.9, "accuracy {acc}");
    let again = ok(&["train", "--corpus", s(&f.corpus)]);
    assert_eq!(again, std::fs::read_to_string(&f.model).unwrap());
}

#[test]
fn input_errors_exit_with_two() {
    let f = fixture();
    let missing = run(&["train", "--corpus", "/nonexistent/corpus.jsonl"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(missing.stdout.is_empty());
    assert!(!missing.stderr.is_empty());

    let unknown = run(&["attribute", "--model", s(&f.model), "--corpus", s(&f.corpus), "--method", "lime"]);
    assert_eq!(unknown.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&unknown.stderr);
    for m in ["grad-input", "ig", "sig", "gradient-shap", "dig-greedy-simplified"] {
        assert!(msg.contains(m), "{msg}");
    }

    assert_eq!(run(&["evaluate", "--model", s(&f.model), "--corpus", s(&f.corpus), "--fraction", "0"]).status.code(), Some(2));
    assert_eq!(run(&["attribute", "--model", s(&f.model), "--sentence", "zzz"]).status.code(), Some(2));
    assert_eq!(run(&["report", s(&f.corpus)]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn non_finite_model_exits_with_three() {
    let f = fixture();
    let mut model: Value = serde_json::from_str(&std::fs::read_to_string(&f.model).unwrap()).unwrap();
    let table = model["embedding_table"].as_array_mut().unwrap();
    for row in table.iter_mut().skip(2) {
        for v in row.as_array_mut().unwrap() {
            *v = Value::from(1e308);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("huge.json");
    std::fs::write(&path, model.to_string()).unwrap();
    let out = run(&["attribute", "--model", s(&path), "--sentence", "good movie good movie", "--method", "ig"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
}

#[test]
fn sig_on_one_word_matches_ig() {
    let f = fixture();
    let doc = ok(&["attribute", "--model", s(&f.model), "--sentence", "superb", "--method", "ig,sig"]);
    let recs = records(&doc);
    let ig = recs[0]["per_word"][0].as_f64().unwrap();
    let sig = recs[1]["per_word"][0].as_f64().unwrap();
    assert!((ig - sig).abs() <= 1e-12);
}

#[test]
fn gradient_call_accounting() {
    let f = fixture();
    let (_d, small) = small_corpus(25);
    for (rule, extra) in [("trapezoid", 1), ("left", 0)] {
        let doc = ok(&[
            "attribute", "--model", s(&f.model), "--corpus", s(&small), "--method", "ig,sig", "--steps", "12", "--rule", rule,
        ]);
        for r in records(&doc) {
            let m = r["tokens"].as_array().unwrap().len() as u64;
            let calls = r["gradient_calls"].as_u64().unwrap();
            match r["method"].as_str().unwrap() {
                "ig" => assert_eq!(calls, 12 + extra),
                "sig" => {
                    assert_eq!(calls, m * (12 + extra));
                    assert_eq!(r["per_word_completeness"].as_array().unwrap().len() as u64, m);
                }
                other => panic!("{other}"),
            }
        }
    }
}

#[test]
fn mask_and_pad_baselines_differ() {
    let f = fixture();
    let (_d, small) = small_corpus(100);
    let run_with = |b: &str| {
        records(&ok(&["attribute", "--model", s(&f.model), "--corpus", s(&small), "--method", "ig", "--baseline", b]))
    };
    let mask = run_with("mask");
    let pad = run_with("pad");
    let differing = mask
        .iter()
        .zip(&pad)
        .filter(|(a, b)| {
            let a = a["per_word"].as_array().unwrap();
            let b = b["per_word"].as_array().unwrap();
            a.iter().zip(b).any(|(x, y)| (x.as_f64().unwrap() - y.as_f64().unwrap()).abs() >= 1e-6)
        })
        .count();
    assert!(differing >= 50, "{differing} of 100");
}

#[test]
fn evaluate_emits_one_row_per_pair_and_is_reproducible() {
    let f = fixture();
    let (_d, small) = small_corpus(60);
    let args = [
        "evaluate", "--model", s(&f.model), "--corpus", s(&small), "--method", "ig,sig,grad-input", "--baseline", "mask,pad",
    ];
    let doc = ok(&args);
    assert_eq!(doc, ok(&args));
    let header: Value = serde_json::from_str(doc.lines().next().unwrap()).unwrap();
    assert_eq!(header["kind"], "metrics");
    assert_eq!(header["format_version"], 1);
    assert_eq!(header["fraction"], 0.2);
    let rows = records(&doc);
    assert_eq!(rows.len(), 6);
    for r in &rows {
        let per: Vec<f64> = r["per_sentence"].as_array().unwrap().iter().map(|p| p["log_odds"].as_f64().unwrap()).collect();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        assert!((mean - r["log_odds"].as_f64().unwrap()).abs() <= 1e-12);
    }
    let mut table_args = args.to_vec();
    table_args.extend(["--format", "table"]);
    let table = ok(&table_args);
    assert!(table.lines().next().unwrap().contains("LO ↓") && table.contains("Comp ↑"));
    assert_eq!(table.lines().count(), 2 + 6);
    let dig = records(&ok(&["attribute", "--model", s(&f.model), "--sentence", "good movie", "--method", "dig-greedy-simplified"]));
    assert_eq!(dig[0]["steps"], 30);
}

#[test]
fn sweep_reproduces_the_step_trends() {
    let f = fixture();
    let (_d, small) = small_corpus(40);
    let doc = ok(&["sweep-steps", "--model", s(&f.model), "--corpus", s(&small)]);
    let rows = records(&doc);
    let find = |m: &str, k: &str| rows.iter().find(|r| r["method"] == m && r["steps"] == k).unwrap();
    let d50 = find("ig", "50")["mean_abs_delta"].as_f64().unwrap();
    let d250 = find("ig", "250")["mean_abs_delta"].as_f64().unwrap();
    assert!(d250 <= d50);
    let sig10 = find("sig", "10")["gradient_calls"].as_u64().unwrap();
    let ig10m = find("ig", "10xm")["gradient_calls"].as_u64().unwrap();
    // SIG@10 spends m·11 calls per sentence, IG@10m spends 10m + 1.
    let words: u64 = std::fs::read_to_string(&small)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["tokens"].as_array().unwrap().len() as u64)
        .sum();
    assert_eq!(sig10, 11 * words);
    assert_eq!(ig10m, 10 * words + 40);
    assert_eq!(doc, ok(&["sweep-steps", "--model", s(&f.model), "--corpus", s(&small)]));
    assert!(!doc.contains("wall"));
}

#[test]
fn report_renders_matching_highlights() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let doc = dir.path().join("attr.jsonl");
    ok(&[
        "attribute", "--model", s(&f.model), "--sentence", "the film was superb and this was a story of", "--method", "sig,ig",
        "--out", s(&doc),
    ]);
    let html = ok(&["report", s(&doc), "--format", "html"]);
    let text = ok(&["report", s(&doc), "--format", "table"]);
    let json: Value = serde_json::from_str(&ok(&["report", s(&doc)])).unwrap();
    for m in json["sentences"][0]["methods"].as_array().unwrap() {
        let flags = m["flags"].as_array().unwrap();
        assert_eq!(flags.iter().filter(|f| *f == "top1").count(), 1);
        assert_eq!(flags.iter().filter(|f| *f != "none").count(), 2);
    }
    assert_eq!(html.matches("<u><b>").count(), 2);
    assert_eq!(html.matches("<b>").count(), 4);
    assert_eq!(text.matches("[[").count(), 2);
    assert!(html.contains("<u><b>superb</b></u>") && text.contains("[[superb]]"));
    assert_eq!(html.matches("<tr>").count(), html.matches("</tr>").count());
    assert_eq!(html.matches("<td>").count(), html.matches("</td>").count());
}
