use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mmadapt::config::ExperimentConfig;

fn mmadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmadapt"))
        .args(args)
        .env("ARC_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let p = dir.join("config.json");
    fs::write(&p, cfg.to_json()).unwrap();
    p.display().to_string()
}

fn short_tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::tiny();
    c.train.pretrain.steps = 4;
    c.train.finetune.steps = 6;
    c.train.pretrain.batch_size = 2;
    c.train.finetune.batch_size = 2;
    c.train.eval_samples = 10;
    c.output.directory = out.to_path_buf();
    c
}

#[test]
fn unknown_key_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"vision": {"grid": 4, "gird": 5}}"#).unwrap();
    let o = mmadapt(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("vision"), "{}", stderr(&o));
    assert!(stderr(&o).contains("gird"), "{}", stderr(&o));
}

#[test]
fn empty_file_exits_2() {
    let o = mmadapt(&["param-audit", "--config", "/dev/null"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &short_tiny(dir.path()));
    let missing = dir.path().join("nope.ckpt");
    let o = mmadapt(&["attn-export", "--config", &cfg, "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = short_tiny(dir.path());
    c.train.stage = mmadapt::config::StageSelect::Finetune;
    c.train.finetune.lr_lora = 1e300;
    c.train.finetune.lr_adapter = 1e300;
    c.train.finetune.lr_qladder = 1e300;
    let cfg = write_config(dir.path(), &c);
    let o = mmadapt(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn grad_check_passes_on_the_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let o = mmadapt(&["grad-check", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-5);
}

#[test]
fn param_audit_reports_parity() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmadapt(&["param-audit", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip_while(|l| !l.starts_with("beta,")).skip(1).collect();
    assert_eq!(rows.len(), 5, "{text}");
    assert!(rows.iter().all(|r| r.ends_with(",true")), "{text}");
}

#[test]
fn train_writes_results_and_checkpoints_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let mut traces = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let cfg = write_config(dir.path(), &short_tiny(&out));
        let o = mmadapt(&["train", "--config", &cfg]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(out.join("pretrain.ckpt").exists());
        assert!(out.join("finetune.ckpt").exists());
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
        assert_eq!(v["stages"].as_array().unwrap().len(), 2);
        assert_eq!(v["params"]["decoder_adapters"], v["params"]["plain_lora_parity"]);
        traces.push(v["stages"].to_string());
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &short_tiny(dir.path()));
    let out = dir.path().join("pre");
    let o = mmadapt(&[
        "train",
        "--config",
        &cfg,
        "--stage",
        "pretrain",
        "--arcana-star",
        "true",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(v["config"]["seed"], 5);
    assert_eq!(v["config"]["train"]["stage"], "pretrain");
    assert_eq!(v["config"]["train"]["arcana_star"], true);
    let groups = &v["stages"][0]["trainable_groups"];
    assert!(groups.as_array().unwrap().iter().any(|g| g == "lora"), "{groups}");
}

#[test]
fn ablate_rank_skips_non_integral_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &short_tiny(dir.path()));
    let o = mmadapt(&["ablate-rank", "--config", &cfg, "--betas", "0.5,0.3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["mm_lora_b0.5_g0.5", "lora"]);
    assert!(stderr(&o).contains("0.3"), "{}", stderr(&o));
}
