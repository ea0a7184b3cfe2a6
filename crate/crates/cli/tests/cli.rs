use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn tiny_config(out: &Path) -> Value {
    json!({
        "dataset": { "canvas": 32, "train_scenes": 16, "test_scenes": 6, "classes_per_scene": [1.0] },
        "protocol": "3-1",
        "training": {
            "arch": { "blocks": 1, "width": 3 },
            "initial": { "epochs": 1, "batch": 4, "adam": { "lr": 0.01 } },
            "incremental": { "epochs": 1, "batch": 4 },
            "inversion": { "steps": 2, "height": 32, "width": 32 },
            "fake_pool_factor": 0.5
        },
        "invert": { "count": 2 },
        "seed": 5,
        "out": out
    })
}

fn write_config(dir: &Path, cfg: &Value) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    p
}

fn hrhf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrhf")).args(args).output().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn error_record(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("stderr record");
    serde_json::from_str(line).unwrap()
}

#[test]
fn gen_data_writes_stamped_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &tiny_config(&out));
    let o = hrhf(&["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = read_json(&out.join("data/manifest.json"));
    assert_eq!(manifest["train"].as_array().unwrap().len(), 16);
    assert_eq!(manifest["test"].as_array().unwrap().len(), 6);
    assert_eq!(manifest["stamp"]["seed"], 5);
    let hash = manifest["stamp"]["config_hash"].as_str().unwrap().to_string();
    let ppm = std::fs::read(out.join("data/train/scene_0000.ppm")).unwrap();
    let head = format!("P6\n# config {hash} seed 5\n32 32\n255\n");
    assert!(ppm.starts_with(head.as_bytes()));
    assert_eq!(ppm.len(), head.len() + 32 * 32 * 3);
    let pgm = std::fs::read(out.join("data/test/scene_0005.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
    assert_eq!(read_json(&out.join("config.json"))["stamp"]["config_hash"], hash.as_str());
}

#[test]
fn train_then_eval_matches_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &tiny_config(&out));
    let cfg = cfg.to_str().unwrap();
    let o = hrhf(&["--config", cfg, "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tdir = out.join("train/hrhf");
    for f in ["step0.ckpt", "step1.ckpt", "report.json", "metrics.csv", "loss.csv", "fakes_step1/fakes.json"] {
        assert!(tdir.join(f).exists(), "{f}");
    }
    let report = read_json(&tdir.join("report.json"));
    assert_eq!(report["history"].as_array().unwrap().len(), 2);

    let eval_out = dir.path().join("eval");
    let ck = tdir.join("step1.ckpt");
    let o = hrhf(&["--config", cfg, "--out", eval_out.to_str().unwrap(), "eval", "--checkpoint", ck.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval = read_json(&eval_out.join("eval/report.json"));
    assert_eq!(eval["metrics"], report["history"][1]);
    assert_eq!(eval["checkpoint"]["config_hash"], report["config_hash"]);

    let inv_out = dir.path().join("inv");
    let o = hrhf(&["--config", cfg, "--out", inv_out.to_str().unwrap(), "invert", "--checkpoint", ck.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fakes = read_json(&inv_out.join("invert/fakes.json"));
    assert_eq!(fakes.as_array().unwrap().len(), 2);
    assert!(fakes[0]["r"].as_array().unwrap().len() == 5);
    assert!(inv_out.join("invert/fake_0001.ppm").exists());
}

#[test]
fn ft_and_hrhf_reports_share_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut c = tiny_config(&out);
    c["method"] = json!("ft");
    let cfg = write_config(dir.path(), &c);
    assert!(hrhf(&["--config", cfg.to_str().unwrap(), "train"]).status.success());
    c["method"] = json!("hrhf");
    let cfg = write_config(dir.path(), &c);
    assert!(hrhf(&["--config", cfg.to_str().unwrap(), "train"]).status.success());
    let ft = read_json(&out.join("train/ft/report.json"));
    let hr = read_json(&out.join("train/hrhf/report.json"));
    assert_eq!(ft["method"], "ft");
    assert_eq!(hr["method"], "hrhf");
    // the step-0 model does not depend on the method
    assert_eq!(ft["history"][0], hr["history"][0]);
}

#[test]
fn r_sweep_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &tiny_config(&out));
    let o = hrhf(&["--config", cfg.to_str().unwrap(), "ablate", "--study", "r-sweep"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = read_json(&out.join("ablate/r_sweep.json"));
    let names: Vec<&str> = table["rows"].as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["r=0.5", "r=1", "r=5", "r=10", "r=20", "random"]);
    let csv = std::fs::read_to_string(out.join("ablate/r_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 6);
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(&dir.path().join("run"));
    c["training"]["lambda"] = json!(1.0);
    let cfg = write_config(dir.path(), &c);
    let o = hrhf(&["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    let rec = error_record(&o);
    assert_eq!(rec["error"], "config");
    assert_eq!(rec["exit_code"], 2);
}

#[test]
fn invalid_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config(&dir.path().join("run"));
    c["protocol"] = json!("3-9");
    let cfg = write_config(dir.path(), &c);
    assert_eq!(hrhf(&["--config", cfg.to_str().unwrap(), "gen-data"]).status.code(), Some(2));
}

#[test]
fn missing_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = hrhf(&["--config", dir.path().join("nope.json").to_str().unwrap(), "gen-data"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_record(&o)["error"], "missing_file");

    let cfg = write_config(dir.path(), &tiny_config(&dir.path().join("run")));
    let o = hrhf(&["--config", cfg.to_str().unwrap(), "eval", "--checkpoint", "/nonexistent/x.ckpt"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn version_mismatch_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut c = tiny_config(&out);
    c["method"] = json!("ft");
    let cfg = write_config(dir.path(), &c);
    assert!(hrhf(&["--config", cfg.to_str().unwrap(), "train"]).status.success());
    let ck = out.join("train/ft/step0.ckpt");
    let mut bytes = std::fs::read(&ck).unwrap();
    bytes[5..9].copy_from_slice(&2u32.to_le_bytes());
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let o = hrhf(&["--config", cfg.to_str().unwrap(), "eval", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_record(&o)["error"], "version_mismatch");
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &tiny_config(&out));
    let o = hrhf(&["--config", cfg.to_str().unwrap(), "--seed", "9", "gen-data"]);
    assert!(o.status.success());
    let resolved = read_json(&out.join("config.json"));
    assert_eq!(resolved["config"]["seed"], 9);
    assert_eq!(resolved["stamp"]["seed"], 9);
}
