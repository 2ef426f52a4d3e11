use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn layerpool(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layerpool")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = layerpool(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the single stderr line.
fn fails(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = layerpool(dir, args);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    (out.status.code().unwrap(), err.trim_end().to_string())
}

const TINY: &str = r#"{"objective": "sup_hard", "corpus": "t.jsonl", "batch_size": 8, "epochs": 2, "output_dir": "out",
  "encoder": {"num_layers": 2, "hidden_dim": 8, "num_heads": 2, "ffn_dim": 16, "max_seq_len": 16}}"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["gen-synthetic", "--kind", "triplets", "--n", "48", "--out", "t.jsonl"]);
    ok(p, &["gen-synthetic", "--kind", "pairs", "--n", "48", "--out", "p.jsonl"]);
    ok(p, &["gen-synthetic", "--kind", "sts", "--n", "40", "--out", "s.jsonl"]);
    ok(p, &["gen-synthetic", "--kind", "bare", "--n", "30", "--out", "b.jsonl"]);
    std::fs::write(p.join("cfg.json"), TINY).unwrap();
    dir
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn train_writes_checkpoint_losses_and_effective_config() {
    let dir = workspace();
    let p = dir.path();
    let inputs = (read(p.join("cfg.json")), read(p.join("t.jsonl")));
    let msg = ok(p, &["train", "--config", "cfg.json"]);
    assert!(msg.starts_with("trained 12 of 12 steps"), "{msg}");
    let losses = String::from_utf8(read(p.join("out/losses.csv"))).unwrap();
    assert_eq!(losses.lines().next(), Some("step,loss"));
    assert_eq!(losses.lines().count(), 13);
    assert!(p.join("out/checkpoint/manifest.json").is_file());
    assert_eq!((read(p.join("cfg.json")), read(p.join("t.jsonl"))), inputs);

    // the echoed config reproduces the run exactly
    let echoed: serde_json::Value = serde_json::from_slice(&read(p.join("out/config.json"))).unwrap();
    assert_eq!(echoed["temperature"], 0.05);
    assert_eq!(echoed["norm_mode"], "softmax");
    let mut again = echoed.clone();
    again["output_dir"] = "again".into();
    again["checkpoint_dir"] = "again/checkpoint".into();
    std::fs::write(p.join("again.json"), again.to_string()).unwrap();
    ok(p, &["train", "--config", "again.json"]);
    assert_eq!(read(p.join("again/losses.csv")), read(p.join("out/losses.csv")));
    for f in ["param.f64", "adam_m.f64", "adam_v.f64"] {
        assert_eq!(read(p.join("again/checkpoint").join(f)), read(p.join("out/checkpoint").join(f)), "{f}");
    }
}

#[test]
fn interrupted_and_resumed_training_matches() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["train", "--config", "cfg.json"]);
    let head = ok(p, &["train", "--config", "cfg.json", "--output-dir", "split", "--max-steps", "5"]);
    assert!(head.starts_with("trained 5 of 12"), "{head}");
    ok(p, &["train", "--config", "cfg.json", "--output-dir", "split", "--resume", "split/checkpoint"]);
    assert_eq!(read(p.join("split/losses.csv")), read(p.join("out/losses.csv")));
    assert_eq!(read(p.join("split/checkpoint/param.f64")), read(p.join("out/checkpoint/param.f64")));

    let (code, err) = fails(p, &["train", "--config", "cfg.json", "--seed", "9", "--output-dir", "x", "--resume", "out/checkpoint"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[cli]: training settings differ"), "{err}");
}

#[test]
fn evaluation_commands() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["train", "--config", "cfg.json"]);
    let ck = ["--checkpoint", "out/checkpoint"];
    let score = ok(p, &[&["eval-sts"][..], &ck, &["--data", "s.jsonl"]].concat());
    let v: f64 = score.trim().parse().unwrap();
    assert!((-1.0..=1.0).contains(&v));
    assert_eq!(score, format!("{v}\n"));
    let cls = ok(p, &[&["eval-sts"][..], &ck, &["--data", "s.jsonl", "--strategy", "cls_last"]].concat());
    assert_ne!(cls, score);

    ok(p, &[&["layer-sweep"][..], &ck, &["--data", "s.jsonl", "--out", "sweep.csv"]].concat());
    let sweep = String::from_utf8(read(p.join("sweep.csv"))).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 * 2);
    let first_cls = sweep.lines().nth(3).unwrap().rsplit(',').next().unwrap().to_string();
    assert_eq!(first_cls.parse::<f64>().unwrap().to_string(), cls.trim());

    ok(p, &[&["inspect-attention"][..], &ck, &["--texts", "b.jsonl", "--out", "att.csv"]].concat());
    let att = String::from_utf8(read(p.join("att.csv"))).unwrap();
    assert!(att.starts_with("text,strategy,row,layer_1,layer_2,fallback\n"));
    assert_eq!(att.lines().count(), 1 + 30 * 3);

    let (code, err) = fails(p, &[&["eval-sts"][..], &ck, &["--data", "missing.jsonl"]].concat());
    assert_eq!(code, 1);
    assert!(err.starts_with("error[io]:"), "{err}");
}

#[test]
fn embed_and_index_round_trip() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["train", "--config", "cfg.json"]);
    let ck = ["--checkpoint", "out/checkpoint"];
    ok(p, &[&["embed"][..], &ck, &["--texts", "b.jsonl", "--out", "e.lape"]].concat());
    ok(p, &[&["embed"][..], &ck, &["--texts", "b.jsonl", "--out", "t.lape", "--pooling", "trained"]].concat());
    assert_eq!(read(p.join("e.lape")).len(), 16 + 4 * 30 * (1 + 8));
    assert_ne!(read(p.join("e.lape")), read(p.join("t.lape")));
    ok(p, &["index", "build", "--embeddings", "e.lape", "--out", "idx", "--nlist", "4"]);
    for f in ["header.json", "centroids.f32", "lists.u32", "vectors.lape"] {
        assert!(p.join("idx").join(f).is_file(), "{f}");
    }
    let hits = ok(p, &[&["index", "search", "--index", "idx"][..], &ck, &["--queries", "b.jsonl", "--top-k", "3", "--nprobe", "4"]].concat());
    assert_eq!(hits.lines().count(), 1 + 30 * 3);
    assert!(hits.lines().nth(1).unwrap().split(',').nth(2) == Some("0"));

    let texts: Vec<String> = String::from_utf8(read(p.join("b.jsonl"))).unwrap().lines().map(String::from).collect();
    let queries: String = texts
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            format!("{}\n", serde_json::json!({"text": v["text"], "gold": i}))
        })
        .collect();
    std::fs::write(p.join("q.jsonl"), queries).unwrap();
    let metrics = ok(p, &[&["index", "eval", "--index", "idx"][..], &ck, &["--queries", "q.jsonl", "--nprobe", "4"]].concat());
    let m: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    assert_eq!(m["queries"], 30);
    assert_eq!(m["memory_bytes"], 4 * (4 * 8) + 4 * 30 + 4 * 30 * 9);
    assert!(m["mrr_at_10"].as_f64().unwrap() > 0.5);
    assert!(m["avg_retrieval_ms"].as_f64().unwrap() >= 0.0);
}

#[test]
fn failures_are_single_line_with_codes() {
    let dir = workspace();
    let p = dir.path();
    let (code, err) = fails(p, &["train", "--config", "cfg.json", "--corpus", "p.jsonl"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[corpus_mismatch]:"), "{err}");
    assert!(!p.join("out/checkpoint").exists());

    std::fs::write(p.join("typo.json"), r#"{"objective": "unsup", "corpus": "b.jsonl", "learningrate": 0.1}"#).unwrap();
    let (code, err) = fails(p, &["train", "--config", "typo.json"]);
    assert_eq!(code, 1);
    assert!(err.contains("`learningrate`") && err.contains("did you mean `learning_rate`"), "{err}");

    let (_, err) = fails(p, &["train", "--config", "cfg.json", "--temperature", "-1"]);
    assert!(err.starts_with("error[config]: config error at `temperature`"), "{err}");
    let (_, err) = fails(p, &["train", "--objective", "unsup"]);
    assert!(err.contains("`corpus`"), "{err}");
    let (_, err) = fails(p, &["train", "--config", "cfg.json", "--corpus", "nope.jsonl"]);
    assert!(err.contains("`corpus`") && err.contains("nope.jsonl"), "{err}");

    assert_eq!(fails(p, &["frobnicate"]).0, 2);
    assert_eq!(fails(p, &["train", "--bogus"]).0, 2);
    assert_eq!(fails(p, &["index", "build"]).0, 2);
    assert_eq!(fails(p, &["--threads", "0", "gen-synthetic", "--kind", "bare", "--n", "1", "--out", "x"]).0, 1);
    assert!(layerpool(p, &["--help"]).status.success());
}

#[test]
fn synthetic_corpora_are_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["gen-synthetic", "--kind", "sts", "--n", "10", "--out", "a.jsonl"]);
    ok(p, &["--threads", "2", "gen-synthetic", "--kind", "sts", "--n", "10", "--out", "b.jsonl"]);
    ok(p, &["gen-synthetic", "--kind", "sts", "--n", "10", "--seed", "1", "--out", "c.jsonl"]);
    assert_eq!(read(p.join("a.jsonl")), read(p.join("b.jsonl")));
    assert_ne!(read(p.join("a.jsonl")), read(p.join("c.jsonl")));
    let first: serde_json::Value = serde_json::from_slice(read(p.join("a.jsonl")).split(|&b| b == b'\n').next().unwrap()).unwrap();
    assert!(first["sent1"].is_string() && first["score"].is_number());
}
