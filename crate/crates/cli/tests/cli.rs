//! End-to-end runs of the `uragate` binary on a tiny corpus.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn tiny_config(stage_lr: f64, max_steps: usize) -> Value {
    let stage = json!({
        "base_lr": stage_lr,
        "epochs": 1,
        "batch_size": 1,
        "grad_accum": 1,
        "warmup_ratio": 0.0,
        "weight_decay": 0.0,
        "max_steps": max_steps
    });
    json!({
        "corpus": { "n_docs": 8, "n_test": 3 },
        "engine": { "stage1": stage, "stage2": stage },
        "flops": { "page_counts": [8, 16], "full_scale_page_counts": [20, 60] }
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uragate")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny_config(1e-3, 1));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["gen", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let x = fs::read(a.join("corpus.jsonl")).unwrap();
    assert!(!x.is_empty());
    assert_eq!(x, fs::read(b.join("corpus.jsonl")).unwrap());
    let first: Value = serde_json::from_str(std::str::from_utf8(&x).unwrap().lines().next().unwrap()).unwrap();
    for key in ["doc_id", "pages", "query", "answer", "evidence_pages", "split"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn invalid_config_exits_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(1e-3, 1);
    cfg["engine"]["model"] = json!({ "top_k": "five" });
    let path = write_config(dir.path(), "bad.json", &cfg);
    let o = run(&["gen", "--config", &path, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("engine.model.top_k"), "{}", stderr(&o));

    let path = write_config(dir.path(), "ok.json", &tiny_config(1e-3, 1));
    let o = run(&["eval", "--config", &path, "--out", dir.path().to_str().unwrap(), "--top-k", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["gen", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny_config(1e-3, 1));
    let o = run(&["eval", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny_config(1e300, 3));
    let o = run(&["pretrain", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn pipeline_runs_and_keep_all_eval_matches_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny_config(1e-3, 1));
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    for cmd in ["gen", "pretrain", "finetune"] {
        let o = run(&[cmd, "--config", &cfg, "--out", out_s, "--workers", "2"]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    assert!(fs::read_to_string(out.join("loss_stage1.csv")).unwrap().starts_with("step,loss_retrieval,loss_generation,loss_total"));
    assert!(out.join("loss_stage2.csv").exists());

    let o = run(&["eval", "--config", &cfg, "--out", out_s, "--mode", "baseline"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let baseline = fs::read(out.join("eval.csv")).unwrap();
    let o = run(&["eval", "--config", &cfg, "--out", out_s, "--mode", "urag", "--top-k", "16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let keep_all = fs::read(out.join("eval.csv")).unwrap();
    assert_eq!(baseline, keep_all);
    assert!(String::from_utf8_lossy(&baseline).starts_with("doc_id,pred,gold,em,anls,top1,top5"));

    let o = run(&["analyze", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let analysis = fs::read_to_string(out.join("analysis.csv")).unwrap();
    assert!(analysis.starts_with("layer,entropy_mean,attn_top1,attn_top5,emb_top1,emb_top5"));
    assert_eq!(analysis.lines().count(), 1 + 8);
    assert!(fs::read_to_string(out.join("similarity_map.csv")).unwrap().starts_with("page_id,token_index,similarity"));
}

#[test]
fn flops_writes_both_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny_config(1e-3, 1));
    let o = run(&["flops", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for (name, rows) in [("flops_toy.csv", 2), ("flops_full_scale.csv", 2)] {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(text.starts_with("n_pages,baseline_flops,urag_flops,reduction_pct"));
        assert_eq!(text.lines().count(), 1 + rows);
    }
}
