use std::path::Path;
use std::process::{Command, Output};

fn partswap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partswap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn partswap")
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, count: usize) -> std::path::PathBuf {
    let data = dir.join("faces.bin");
    let out = partswap(&["gen-data", "--out", p(&data), "--count", &count.to_string(), "--seed", "5"]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    data
}

fn train_tiny(dir: &Path, data: &Path) -> std::path::PathBuf {
    let run = dir.join("run");
    let out = partswap(&[
        "train", "--data", p(data), "--out", p(&run), "--batch-size", "4", "--max-steps", "2", "--seed", "1",
    ]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    run
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), 12);
    let b = dir.path().join("again.bin");
    let out = partswap(&["gen-data", "--out", p(&b), "--count", "12", "--seed", "5"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 64);
    let run = train_tiny(dir.path(), &data);
    for f in ["model.ck", "metrics.jsonl", "config.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["step", "L_a", "L_g", "L_m", "L_e", "total"] {
        assert!(first.get(key).is_some(), "metrics line lacks {key}");
    }
    let ck = run.join("model.ck");

    let report = dir.path().join("mixing.json");
    let out = partswap(&[
        "eval-mixing", "--ckpt", p(&ck), "--data", p(&data), "--groups", "3", "--seed", "2", "--out", p(&report),
    ]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["per_subspace"].as_array().unwrap().len(), 5);

    let table = dir.path().join("subspaces.json");
    let out = partswap(&["analyze-subspaces", "--ckpt", p(&ck), "--data", p(&data), "--out", p(&table)]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&table).unwrap()).unwrap();
    assert!(v.as_object().unwrap().len() == 5);

    let img = dir.path().join("edit.ppm");
    let out = partswap(&[
        "edit-attribute", "--ckpt", p(&ck), "--data", p(&data), "--attr", "mouth_open", "--index", "0",
        "--strength", "-1.5", "--out", p(&img),
    ]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    assert!(std::fs::read(&img).unwrap().starts_with(b"P6\n32 32\n255\n"));

    let grid = dir.path().join("grid.ppm");
    let out = partswap(&["mix-grid", "--ckpt", p(&ck), "--data", p(&data), "--indices", "0,1,2", "--out", p(&grid)]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    assert!(std::fs::read(&grid).unwrap().starts_with(b"P6\n"));

    let out = partswap(&["mix-grid", "--ckpt", p(&ck), "--data", p(&data), "--indices", "0", "--out", p(&grid)]);
    assert_eq!(out.status.code(), Some(3));
    let out = partswap(&[
        "edit-attribute", "--ckpt", p(&ck), "--data", p(&data), "--attr", "freckles", "--index", "0", "--strength",
        "1", "--out", p(&img),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).starts_with("error kind=invalid-config:"));
}

#[test]
fn missing_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = partswap(&[
        "analyze-subspaces", "--ckpt", p(&dir.path().join("nope.ck")), "--data", "x.bin", "--out", "o.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error kind=missing-file:"));
}

#[test]
fn invalid_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"epochz": 3}}"#).unwrap();
    let out = partswap(&["train", "--config", p(&cfg), "--data", "x.bin", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).starts_with("error kind=invalid-config:"));

    let out = partswap(&["gen-data", "--out", "x.bin", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(3));

    std::fs::write(&cfg, r#"{"train": {"batch_size": 0}}"#).unwrap();
    let out = partswap(&["train", "--config", p(&cfg), "--data", "x.bin", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn diverged_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 16);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"lr": 1e30, "batch_size": 4, "max_steps": 6}}"#).unwrap();
    let run = dir.path().join("run");
    let out = partswap(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr_line(&out));
    assert!(stderr_line(&out).starts_with("error kind=diverged:"));
}

#[test]
fn help_succeeds() {
    let out = partswap(&["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("mix-grid"));
}

#[test]
fn zero_strength_edit_is_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 24);
    let run = train_tiny(dir.path(), &data);
    let ck = run.join("model.ck");
    let img = dir.path().join("edit0.ppm");
    let out = partswap(&[
        "edit-attribute", "--ckpt", p(&ck), "--data", p(&data), "--attr", "pale_skin", "--index", "5",
        "--strength", "0", "--out", p(&img),
    ]);
    assert!(out.status.success(), "{}", stderr_line(&out));
    let model = partswap::model::load_checkpoint::<f32>(&ck).unwrap().model;
    let ds = partswap::synthdata::read_dataset(&data).unwrap();
    let recon = model.reconstruct(&[ds.sprites[5].image()]).unwrap();
    assert_eq!(std::fs::read(&img).unwrap(), partswap::synthdata::encode_ppm(&recon[0]));
}

#[test]
fn paired_ablation_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 24);
    let mut reports = Vec::new();
    for (name, extra) in [("isa", None), ("plain", Some("--no-isa"))] {
        let run = dir.path().join(name);
        let mut args = vec!["train", "--data", p(&data), "--out", p(&run), "--batch-size", "4", "--max-steps", "2"];
        args.extend(extra);
        let out = partswap(&args);
        assert!(out.status.success(), "{}", stderr_line(&out));
        let report = dir.path().join(format!("{name}.json"));
        let ck = run.join("model.ck");
        let out = partswap(&["eval-mixing", "--ckpt", p(&ck), "--data", p(&data), "--groups", "2", "--out", p(&report)]);
        assert!(out.status.success(), "{}", stderr_line(&out));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
        reports.push(v);
    }
    assert_eq!(reports[0]["enable_isa"], true);
    assert_eq!(reports[1]["enable_isa"], false);
    assert_eq!(reports[0]["groups"], reports[1]["groups"]);
}
