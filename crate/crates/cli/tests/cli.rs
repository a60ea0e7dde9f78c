use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use convqa::config::PipelineConfig;
use convqa::corpus::Corpus;
use convqa::dense::EmbeddingStore;
use convqa::lexical::InvertedIndex;
use convqa::model::ModelParams;
use convqa::pipeline::Engine;
use convqa_cli::session::Session;

const QUICK: &str = "\
d = 32
d_f = 1024
d_t = 256
[pretrain]
epochs = 3
[joint]
epochs = 1
[dhm]
epochs = 1
[explorer]
epochs = 1
";

fn convqa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convqa"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = convqa(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small trained data directory.
fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("quick.toml"), QUICK).unwrap();
    ok(p, &["generate-fixture", "--out", "fx", "--passages", "120", "--conversations", "20"]);
    let c = ["--config", "quick.toml"];
    for cmd in [
        vec!["ingest", "--passages", "fx/passages.jsonl", "--conversations", "fx/conversations.jsonl"],
        vec!["index"],
        vec!["pretrain"],
        vec!["train"],
    ] {
        let mut args = c.to_vec();
        args.extend(cmd);
        ok(p, &args);
    }
    dir
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = convqa(dir.path(), &["eval", "--bogus"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn eval_before_index_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["generate-fixture", "--out", "fx", "--passages", "60", "--conversations", "5"]);
    ok(p, &["ingest", "--passages", "fx/passages.jsonl", "--conversations", "fx/conversations.jsonl"]);
    let out = convqa(p, &["eval"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: missing-artifact: lexical index"), "{err}");
}

#[test]
fn out_of_order_phase_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["generate-fixture", "--out", "fx", "--passages", "60", "--conversations", "5"]);
    ok(p, &["ingest", "--passages", "fx/passages.jsonl", "--conversations", "fx/conversations.jsonl"]);
    ok(p, &["index"]);
    let out = convqa(p, &["train", "--phase", "dhm"]);
    assert!(stderr(&out).starts_with("error: phase-order: phase `dhm` needs `pretrain` first"), "{}", stderr(&out));
}

#[test]
fn held_lock_blocks_writers_but_not_readers() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["generate-fixture", "--out", "fx", "--passages", "60", "--conversations", "5"]);
    ok(p, &["ingest", "--passages", "fx/passages.jsonl", "--conversations", "fx/conversations.jsonl"]);
    std::fs::write(p.join("data/.lock"), "1").unwrap();
    let out = convqa(p, &["index"]);
    assert!(stderr(&out).starts_with("error: locked: "), "{}", stderr(&out));
    ok(p, &["hop-coverage"]);
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "n_one = 3\n").unwrap();
    let out = convqa(dir.path(), &["--config", "bad.toml", "hop-coverage"]);
    assert!(stderr(&out).starts_with("error: config: "), "{}", stderr(&out));
}

#[test]
fn scripted_pipeline_writes_parseable_reports_and_answers() {
    let dir = prepared();
    let p = dir.path();
    let text = ok(p, &["--config", "quick.toml", "eval", "--setting", "true", "--out", "report.json"]);
    assert!(text.contains("Rt-R"));
    for f in ["report.json", "data/reports/eval-true.json"] {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join(f)).unwrap()).unwrap();
        assert_eq!(v["setting"], "true");
        assert!(v["questions"].as_u64().unwrap() > 0);
    }
    let log = std::fs::read_to_string(p.join("data/loss_log.csv")).unwrap();
    assert_eq!(log.matches("phase,epoch").count(), 1);
    assert_eq!(log.lines().count(), 1 + 3 + 1 + 1 + 1);

    let cov = ok(p, &["hop-coverage", "--json", "--max-hops", "3"]);
    let v: serde_json::Value = serde_json::from_str(&cov).unwrap();
    assert_eq!(v["within"].as_array().unwrap().len(), 3);

    let mut child = Command::new(env!("CARGO_BIN_EXE_convqa"))
        .current_dir(p)
        .args(["--config", "quick.toml", "--trace", "ask"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    use std::io::Write;
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"tell me about the career of someone\nwhat about the music\n:quit\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let s = String::from_utf8(out.stdout).unwrap();
    assert_eq!(s.matches("answer: ").count(), 2, "{s}");
    assert!(s.contains("round 2:"), "second turn runs a DHM round: {s}");
    assert!(s.contains("s_a=") || s.contains("no valid span"));
}

fn load(p: &Path) -> (Corpus, ModelParams, EmbeddingStore, InvertedIndex) {
    let d = PathBuf::from(p).join("data");
    (
        Corpus::load(&d.join("corpus")).unwrap(),
        ModelParams::load(&d.join("model.ckpt")).unwrap(),
        EmbeddingStore::load(&d.join("store.bin")).unwrap(),
        InvertedIndex::load(&d.join("lexical.json")).unwrap(),
    )
}

#[test]
fn session_feeds_earlier_turns_into_history() {
    let dir = prepared();
    let (corpus, params, store, index) = load(dir.path());
    let cfg = PipelineConfig::default();
    let engine = Engine {
        corpus: &corpus,
        params: &params,
        store: &store,
        index: &index,
        config: &cfg,
    };
    let conv = &corpus.conversations()[0];
    let (q1, q2) = (&conv.turns[0].question, &conv.turns[1].question);

    let mut a = Session::new(cfg.clone(), false);
    let mut b = Session::new(cfg.clone(), false);
    let first = a.ask(&engine, q1).unwrap();
    assert!(a.history().len() == 1 && b.history().is_empty());
    assert_eq!(a.history()[0].question, *q1);
    assert_eq!(a.history()[0].answer_passages, first.answer_passages());
    assert_eq!(a.turns[0].1, first.answer);

    let second = a.ask(&engine, q2).unwrap();
    let direct = engine.answer_turn(q2, &a.history()[..1]).unwrap();
    assert_eq!(second.retriever(), direct.retriever());
    assert_eq!(second.explore.history, vec![q1.clone()]);

    b.ask(&engine, q2).unwrap();
    assert_eq!(b.history().len(), 1);
    assert_eq!(a.history().len(), 2);
    a.reset();
    assert!(a.turns.is_empty() && a.history().is_empty());
}
