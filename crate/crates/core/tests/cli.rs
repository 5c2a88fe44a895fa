//! End-to-end runs of the `latent-dialog` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use latent_dialog::cli::RunConfig;
use latent_dialog::corpus::Vocab;
use latent_dialog::metrics::EvalReport;
use latent_dialog::trainer::TrainState;
use tempfile::TempDir;

const SMALL: &str = "seed = 1
[model]
num_layers = 2
hidden = 32
heads = 4
latent_k = 5
[train]
lr = 5e-3
steps = 300
checkpoint_every = 100
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latent-dialog"))
}

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy.jsonl")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_stdin(args: &[&str], input: &str) -> String {
    let mut child = bin()
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One overfit run shared by every test that needs a trained model.
fn trained() -> &'static (TempDir, PathBuf) {
    static RUN: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(&cfg, SMALL).unwrap();
        let out = dir.path().join("run");
        run_ok(&["train", "--config", s(&cfg), "--corpus", s(&corpus()), "--out", s(&out)]);
        (dir, out)
    })
}

fn ckpt() -> String {
    trained().1.join("ckpt-final.bin").to_str().unwrap().to_owned()
}

#[test]
fn train_writes_run_directory() {
    let run = &trained().1;
    for f in ["vocab.txt", "config.toml", "log.jsonl", "ckpt-final.bin", "ckpt-100.bin", "ckpt-300.bin"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 300);
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["step"], 300);
    // Intermediate checkpoint at step 300 is the final state.
    assert_eq!(
        fs::read(run.join("ckpt-300.bin")).unwrap(),
        fs::read(run.join("ckpt-final.bin")).unwrap()
    );
}

#[test]
fn same_seed_gives_identical_checkpoints_and_zero_steps_is_init() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SMALL).unwrap();
    let train = |name: &str, steps: &str| {
        let out = dir.path().join(name);
        run_ok(&["train", "--config", s(&cfg), "--corpus", s(&corpus()), "--out", s(&out), "--steps", steps]);
        fs::read(out.join("ckpt-final.bin")).unwrap()
    };
    assert_eq!(train("a", "5"), train("b", "5"));

    let zero = train("z", "0");
    let rc = RunConfig::parse(SMALL).unwrap();
    let vocab = Vocab::load(&dir.path().join("z/vocab.txt")).unwrap();
    let init = TrainState::new(&rc.model.to_config(vocab.len()), &rc.train.to_config(), rc.seed).unwrap();
    let path = dir.path().join("init.bin");
    init.save(&path).unwrap();
    assert_eq!(zero, fs::read(path).unwrap());
}

#[test]
fn eval_reports_every_metric_and_repeats_exactly() {
    let a = run_ok(&["eval", "--checkpoint", &ckpt(), "--corpus", s(&corpus())]);
    let b = run_ok(&["eval", "--checkpoint", &ckpt(), "--corpus", s(&corpus())]);
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    let keys = [
        "bleu1",
        "bleu2",
        "distinct1",
        "distinct2",
        "knowledge_recall",
        "knowledge_precision",
        "knowledge_f1",
        "perplexity",
        "samples",
    ];
    assert_eq!(v.as_object().unwrap().len(), keys.len());
    for k in keys {
        assert!(v.get(k).is_some(), "{k} missing");
    }
    let report: EvalReport = serde_json::from_str(&a).unwrap();
    assert_eq!(report.samples, 16);
    assert!(report.bleu1 > 0.9, "bleu1 {}", report.bleu1);
}

#[test]
fn all_candidates_are_ranked_and_lead_with_the_default_output() {
    let dir = tempfile::tempdir().unwrap();
    let contexts = dir.path().join("ctx.jsonl");
    fs::write(
        &contexts,
        "{\"context\":[{\"speaker\":\"B\",\"text\":\"how was your day?\"}]}\n",
    )
    .unwrap();
    let best = run_ok(&["generate", "--checkpoint", &ckpt(), "--contexts", s(&contexts)]);
    let rows = run_ok(&["generate", "--checkpoint", &ckpt(), "--contexts", s(&contexts), "--all-candidates", "--json"]);
    let rows: Vec<serde_json::Value> = rows.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 5);
    let scores: Vec<f64> = rows.iter().map(|r| r["coherence"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{scores:?}");
    assert_eq!(rows[0]["text"].as_str().unwrap(), best.trim_end());
    let mut zs: Vec<u64> = rows.iter().map(|r| r["z"].as_u64().unwrap()).collect();
    zs.sort_unstable();
    assert_eq!(zs, [0, 1, 2, 3, 4]);

    let plain = run_ok(&["generate", "--checkpoint", &ckpt(), "--contexts", s(&contexts), "--all-candidates"]);
    assert_eq!(plain.lines().count(), 5);
}

#[test]
fn generate_json_feeds_eval_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let preds = run_ok(&["generate", "--checkpoint", &ckpt(), "--contexts", s(&corpus()), "--json"]);
    let path = dir.path().join("preds.jsonl");
    fs::write(&path, &preds).unwrap();
    let from_file = run_ok(&["eval", "--checkpoint", &ckpt(), "--predictions", s(&path)]);
    let direct = run_ok(&["eval", "--checkpoint", &ckpt(), "--corpus", s(&corpus())]);
    assert_eq!(from_file, direct);
}

#[test]
fn chat_answers_each_turn_and_reset_restarts_the_session() {
    let out = with_stdin(&["chat", "--checkpoint", &ckpt()], "hi there!\nhow was your day?\ntea or coffee?\n");
    assert_eq!(out.lines().count(), 3);

    let debug = with_stdin(&["chat", "--checkpoint", &ckpt(), "--debug"], "hi there!\nhow was your day?\n");
    assert_eq!(debug.lines().filter(|l| l.starts_with("  [z=")).count(), 2 * 5);
    assert_eq!(debug.lines().count(), 2 * 6);

    let fresh = with_stdin(&["chat", "--checkpoint", &ckpt()], "tea or coffee?\n");
    let after = with_stdin(&["chat", "--checkpoint", &ckpt()], "hi there!\n/reset\ntea or coffee?\n");
    assert_eq!(after.lines().nth(1).unwrap(), fresh.trim_end());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    // Usage.
    assert_eq!(run(&["train"]).status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nhiden = 8\n").unwrap();
    assert_eq!(
        run(&["train", "--config", s(&bad), "--corpus", s(&corpus()), "--out", s(&out)]).status.code(),
        Some(1)
    );
    // Data.
    assert_eq!(
        run(&["train", "--corpus", "/nonexistent.jsonl", "--out", s(&out)]).status.code(),
        Some(2)
    );
    let other = dir.path().join("other.toml");
    fs::write(&other, SMALL.replace("hidden = 32", "hidden = 16")).unwrap();
    let mismatched = run(&["eval", "--checkpoint", &ckpt(), "--config", s(&other), "--corpus", s(&corpus())]);
    assert_eq!(mismatched.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatched.stderr).contains("config hash mismatch"));
}

#[test]
fn divergence_exits_with_three_and_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SMALL.replace("lr = 5e-3", "lr = 1e300")).unwrap();
    let out = dir.path().join("run");
    let res = run(&["train", "--config", s(&cfg), "--corpus", s(&corpus()), "--out", s(&out), "--steps", "20"]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("ckpt-last-good.bin").exists());
    assert!(!out.join("ckpt-final.bin").exists());
}
