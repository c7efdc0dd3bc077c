use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"seed = 1
variant = "D"
output = "unused"

[model]
num_layers = 2
prompts_per_stage = 2
embed_dim = 16
patch_size = 4
num_heads = 2
mlp_ratio = 2.0

[data]
base = "shapes"
shift = "color_jitter"
severity = 1.0
classes = 3
per_class_count = 8
image_size = 8

[source]
steps = 4
batch_size = 8

[adapt]
steps = 3
batch_size = 8
projection_dim = 8
eval_every = 0

[[multi.sources]]
name = "blur"
shift = "blur_noise"
severity = 0.5
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prompt-tta"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
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

fn lines(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p)
        .unwrap_or_else(|e| panic!("{}: {e}", p.display()))
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn source_then_adapt_then_eval() {
    let (tmp, cfg) = setup();
    let src = tmp.path().join("src");
    ok(&["train-source", "--config", s(&cfg), "--output", s(&src), "--save-data"]);
    for f in ["config.toml", "metrics.jsonl", "source.safetensors", "accuracy_target.csv"] {
        assert!(src.join(f).exists(), "{f}");
    }
    assert_eq!(lines(&src.join("metrics.jsonl")).len(), 4);
    assert_eq!(lines(&src.join("accuracy_target.csv")).len(), 1 + 3 + 2);
    assert!(src.join("data/target").is_dir());
    let ckpt = src.join("source.safetensors");

    let adapted = tmp.path().join("adapt");
    let stdout = ok(&[
        "adapt", "--config", s(&cfg), "--output", s(&adapted), "--checkpoint", s(&ckpt), "--steps", "2", "--dump-bank",
    ]);
    assert!(stdout.contains("adapted"));
    for f in ["adapted.safetensors", "accuracy_before.csv", "accuracy_after.csv", "bank.csv"] {
        assert!(adapted.join(f).exists(), "{f}");
    }
    let records = lines(&adapted.join("metrics.jsonl"));
    assert_eq!(records.len(), 2);
    let first: serde_json::Value = serde_json::from_str(&records[0]).unwrap();
    assert!(first["loss_total"].is_number());
    assert!(lines(&adapted.join("config.toml")).iter().any(|l| l == "steps = 2"));

    let eval = tmp.path().join("eval");
    let stdout = ok(&[
        "eval", "--config", s(&cfg), "--output", s(&eval), "--checkpoint", s(&adapted.join("adapted.safetensors")), "--split", "source",
    ]);
    assert!(stdout.starts_with("class,accuracy"));
    assert!(eval.join("eval_source.csv").exists());

    let online = tmp.path().join("online");
    ok(&["adapt-online", "--config", s(&cfg), "--output", s(&online), "--checkpoint", s(&ckpt)]);
    // 24 target images in batches of 8.
    assert_eq!(lines(&online.join("metrics.jsonl")).len(), 3);
    assert!(online.join("online_summary.csv").exists());

    let emb = tmp.path().join("emb");
    ok(&["export-embeddings", "--config", s(&cfg), "--output", s(&emb), "--checkpoint", s(&ckpt), "--limit", "10"]);
    let rows = lines(&emb.join("embeddings.csv"));
    assert_eq!(rows.len(), 11);
    assert!(rows.iter().all(|r| r.split(',').count() == 17));
    assert_eq!(rows[0].split(',').next_back(), Some("label"));
}

#[test]
fn sweep_writes_one_run_per_ratio() {
    let (tmp, cfg) = setup();
    let out = tmp.path().join("sweep");
    ok(&["sweep", "--config", s(&cfg), "--output", s(&out), "--steps", "1"]);
    let summary = lines(&out.join("summary.csv"));
    assert_eq!(summary[0], "data_ratio,run_dir,source_only,adapted");
    assert_eq!(summary.len(), 5);
    for r in ["0.01", "0.1", "0.5", "1"] {
        let dir = out.join(format!("ratio_{r}"));
        assert!(dir.join("accuracy_after.csv").exists(), "{}", dir.display());
        assert!(summary.iter().any(|l| l.starts_with(&format!("{r},"))));
    }
}

#[test]
fn multi_source_training_writes_a_bundle() {
    let (tmp, cfg) = setup();
    let out = tmp.path().join("multi");
    ok(&["adapt-multi", "--config", s(&cfg), "--output", s(&out), "--steps", "2"]);
    assert!(out.join("multi_source.safetensors").exists());
    assert_eq!(lines(&out.join("source_metrics.jsonl")).len(), 4);
    assert_eq!(lines(&out.join("metrics.jsonl")).len(), 2);
}

#[test]
fn invalid_config_fails_with_a_line_number() {
    let (tmp, _) = setup();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, TINY.replace("embed_dim = 16", "embed_dim = 15")).unwrap();
    let out = run(&["train-source", "--config", s(&bad)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 8"), "{err}");
}

#[test]
fn missing_checkpoint_fails() {
    let (tmp, cfg) = setup();
    let out = run(&[
        "adapt", "--config", s(&cfg), "--output", s(&tmp.path().join("x")), "--checkpoint", s(&tmp.path().join("nope.safetensors")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.safetensors"));
}

#[test]
fn ablation_emits_four_rows() {
    let (tmp, cfg) = setup();
    let src = tmp.path().join("src");
    ok(&["train-source", "--config", s(&cfg), "--output", s(&src)]);
    let out = tmp.path().join("ablate");
    let stdout = ok(&[
        "ablate", "--config", s(&cfg), "--output", s(&out), "--checkpoint", s(&src.join("source.safetensors")), "--steps", "1",
    ]);
    let rows = lines(&out.join("ablation.csv"));
    assert_eq!(rows.len(), 5);
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["pl", "pl+mb", "pl+mb+cls", "full"]);
    assert!(stdout.starts_with("config,memory_bank"));
}

#[test]
fn shipped_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let cfg = prompt_tta::config::ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.model_config().num_stages, 4);
    assert_eq!(cfg.multi.unwrap().sources.len(), 2);
}
