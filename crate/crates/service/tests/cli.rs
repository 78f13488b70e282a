use std::io::Cursor;
use std::path::Path;

use clap::Parser;
use persona_service::cli::{dispatch, run, Cli};

fn exec(args: &[&str]) -> Result<String, String> {
    let cli = Cli::try_parse_from(std::iter::once("persona").chain(args.iter().copied())).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    dispatch(cli, &mut Cursor::new(Vec::new()), &mut out).map_err(|e| e.to_string())?;
    Ok(String::from_utf8(out).unwrap())
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data = p(d, "corpus.jsonl");
    let out = exec(&["prepare-data", "--synthetic", "6", "--turns", "2", "--out", &data]).unwrap();
    assert!(out.contains("6 episodes"));
    assert!(Path::new(&format!("{data}.vocab.json")).exists());

    let cfg = p(d, "run.toml");
    std::fs::write(&cfg, "epochs = 1\nlr = 0.001\n[selfplay-finetune]\nbatch_size = 2\n").unwrap();
    let ck = d.to_string_lossy().into_owned();
    let base = ["--config", &cfg, "--ckpt-dir", &ck];

    let run_with = |extra: &[&str]| {
        let mut v: Vec<&str> = base.to_vec();
        v.extend_from_slice(extra);
        exec(&v)
    };
    let t = run_with(&["train-transmitter", "--data", &data]).unwrap();
    assert!(t.contains("epoch 1") && !t.contains("epoch 2"));
    assert!(d.join("transmitter.ckpt").exists());
    run_with(&["train-receiver", "--data", &data]).unwrap();
    assert!(d.join("receiver.ckpt").exists());

    let sp = run_with(&["selfplay-finetune", "--data", &data, "--dialogues", "4", "--turns", "2"]).unwrap();
    assert!(sp.contains("over 2 batches"), "{sp}");
    let log = std::fs::read_to_string(d.join("agent.ckpt.rewards.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for l in log.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for k in ["batch", "r1", "r2", "r3", "reward"] {
            assert!(v.get(k).is_some());
        }
    }

    let report = p(d, "eval.json");
    run_with(&["evaluate", "--data", &data, "--report", &report]).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["ppl"].as_f64().unwrap() > 1.0);
    assert!(v["hits_at_1"].is_number());

    let probe = run_with(&["probe-receiver", "--data", &data, "--distractors", "3"]).unwrap();
    let v: serde_json::Value = serde_json::from_str(probe.trim()).unwrap();
    assert!(v["hits_at_1"].is_number());

    let persona = p(d, "persona.txt");
    std::fs::write(&persona, "i like chess.\ni have a dog.\n").unwrap();
    let history = p(d, "history.txt");
    std::fs::write(&history, "hello!\n").unwrap();
    let g = run_with(&["generate", "--persona", &persona, "--history", &history, "--max-steps", "6"]).unwrap();
    assert!(g.ends_with('\n'));

    let cli = Cli::try_parse_from([
        "persona", "--ckpt-dir", &ck, "chat", "--persona", &persona, "--max-steps", "6", "--show-perception",
    ])
    .unwrap();
    let mut out = Vec::new();
    dispatch(cli, &mut Cursor::new(b"hi!\n\ndo you like dogs?\n/quit\nignored\n".to_vec()), &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.matches("bot: ").count(), 2);
    assert_eq!(text.matches("perception:").count(), 2);
    assert!(text.contains("i like chess."));
}

#[test]
fn missing_inputs_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = p(tmp.path(), "none.ckpt");
    assert!(exec(&["evaluate", "--ckpt", &missing, "--data", &missing]).is_err());
    let err = exec(&["train-receiver"]).unwrap_err();
    assert!(err.contains("--data"));
    assert!(exec(&["prepare-data", "--out", &p(tmp.path(), "x.jsonl")]).is_err());
}

#[test]
fn usage_errors_exit_two() {
    let mut out = Vec::new();
    let err = run(["persona", "serve", "--no-such-flag"], &mut out).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
