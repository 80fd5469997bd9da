//! End-to-end checks of the command-line surface: config handling, exit
//! codes, dry runs, and the full corpus -> train -> infer -> eval path on a
//! miniature setup.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cloze")
}

fn work_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cloze_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, steps: usize) -> PathBuf {
    let corpus_dir = dir.join("corpus");
    let config = serde_json::json!({
        "out_dir": dir.join("run"),
        "graph": {
            "annotations": [
                {"id": "invert", "family": "edit", "forward": true},
                {"id": "grayscale", "family": "style", "forward": true}
            ],
            "extra_edges": []
        },
        "corpus": {
            "count": 6,
            "size": 16,
            "seed": 1200,
            "annotations": ["invert", "grayscale"],
            "out_dir": corpus_dir
        },
        "model": {
            "width": 16,
            "depth": 1,
            "heads": 2,
            "patch": 2,
            "mode": "fill",
            "rope_split": [2, 2, 4],
            "prompt_dim": 8
        },
        "train": {
            "steps": steps,
            "micro_batch": 2,
            "accum_steps": 1,
            "lr": 1e-3,
            "wd": 0.0,
            "seed": 7,
            "mode": "fill",
            "context_max": 1,
            "len_range": [2, 2],
            "loss_scope": "masked-only",
            "task_text_p": 0.5
        },
        "eval": {
            "tasks": ["image->invert"],
            "contexts": [0, 1],
            "n_queries": 2,
            "holdout_from": 4,
            "seed": 3,
            "steps": 4,
            "include_task_text": true
        },
        "train_records": 4
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(bin())
        .args(args)
        .env("CLOZE_THREADS", "2")
        .output()
        .expect("spawn cloze");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).to_string(),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

#[test]
fn usage_errors_exit_1() {
    let (code, _, err) = run(&[]);
    assert_eq!(code, 1, "{err}");
    let (code, _, _) = run(&["bogus"]);
    assert_eq!(code, 1);
    let (code, _, _) = run(&["train"]);
    assert_eq!(code, 1);
}

#[test]
fn config_errors_exit_2() {
    let dir = work_dir("badcfg");
    let path = dir.join("bad.json");
    std::fs::write(&path, "{\"out_dir\": \"x\", \"unknown_key\": 1}").unwrap();
    let (code, _, err) = run(&["tasks", "--config", path.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("unknown_key") || err.contains("unknown field"), "{err}");

    let (code, _, _) = run(&["tasks", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(code, 2);
}

#[test]
fn corpus_dry_run_writes_nothing() {
    let dir = work_dir("dry");
    let cfg = write_config(&dir, 2);
    let (code, out, err) = run(&["corpus", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("6 records"), "{out}");
    assert!(!dir.join("corpus").exists());
}

#[test]
fn tasks_counts_match_enumeration_oracle() {
    let dir = work_dir("tasks");
    let cfg = write_config(&dir, 2);
    let (code, out, err) = run(&["tasks", "--config", cfg.to_str().unwrap(), "--max-len", "3"]);
    assert_eq!(code, 0, "{err}");
    // 3-node star, maxLen 3: brute-force enumeration gives 10
    assert!(out.contains("total: 10 tasks"), "{out}");

    let (code, json_out, _) = run(&["tasks", "--config", cfg.to_str().unwrap(), "--json", "--max-len", "2"]);
    assert_eq!(code, 0);
    let parsed: Vec<serde_json::Value> = serde_json::from_str(&json_out).unwrap();
    assert_eq!(parsed.len(), 4);
}

#[test]
fn full_pipeline_runs_and_eval_report_exists() {
    let dir = work_dir("pipeline");
    let cfg = write_config(&dir, 3);
    let cfg_s = cfg.to_str().unwrap();

    let (code, _, err) = run(&["corpus", "--config", cfg_s]);
    assert_eq!(code, 0, "{err}");
    assert!(dir.join("corpus/manifest.json").exists());
    assert!(dir.join("run/run_manifest_corpus.json").exists());

    // training without a corpus fails cleanly before this point; with it:
    let (code, out, err) = run(&["train", "--config", cfg_s]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("checkpoint"), "{out}");
    assert!(dir.join("run/model.ckpt").exists());
    assert!(dir.join("run/train_log.jsonl").exists());

    // infer: forward direction with one demonstration row
    let base = dir.join("corpus/1200_image.png");
    let inv = dir.join("corpus/1200_invert.png");
    let ctx_base = dir.join("corpus/1201_image.png");
    let ctx_inv = dir.join("corpus/1201_invert.png");
    let out_png = dir.join("gen.png");
    let (code, _, err) = run(&[
        "infer",
        "--checkpoint",
        dir.join("run/model.ckpt").to_str().unwrap(),
        "--task",
        "image->invert",
        "--query",
        base.to_str().unwrap(),
        "--context",
        &format!("{},{}", ctx_base.display(), ctx_inv.display()),
        "--include-task-text",
        "--steps",
        "4",
        "--seed",
        "9",
        "--out",
        out_png.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out_png.exists());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("gen.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 9);
    assert_eq!(meta["steps"], 4);
    assert_eq!(meta["C"], 1);
    assert_eq!(meta["L"], 2);
    assert_eq!(meta["task_id"], "image->invert");

    // reverse: mask the condition cell, supply the target
    let rev_png = dir.join("rev.png");
    let (code, _, err) = run(&[
        "infer",
        "--checkpoint",
        dir.join("run/model.ckpt").to_str().unwrap(),
        "--task",
        "invert->image",
        "--query",
        inv.to_str().unwrap(),
        "--target",
        base.to_str().unwrap(),
        "--mask-cell",
        "0",
        "--steps",
        "4",
        "--out",
        rev_png.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(rev_png.exists());

    let (code, out, err) = run(&["eval", "--config", cfg_s]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("eval_report.json"), "{out}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run/eval_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn train_without_corpus_exits_nonzero() {
    let dir = work_dir("nocorpus");
    let cfg = write_config(&dir, 2);
    let (code, _, err) = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_ne!(code, 0);
    assert!(err.contains("manifest"), "{err}");
}

#[test]
fn corrupted_checkpoint_exits_nonzero_with_version_message() {
    let dir = work_dir("badckpt");
    let bad = dir.join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint at all").unwrap();
    let base = dir.join("q.png");
    cloze::synthcorpus::gen_base_image(1, 8).save_png(&base).unwrap();
    let (code, _, err) = run(&[
        "infer",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--task",
        "image->invert",
        "--query",
        base.to_str().unwrap(),
    ]);
    assert_ne!(code, 0);
    assert!(err.contains("version") || err.contains("magic"), "{err}");
}
