use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const TINY: &str = r#"{
  "model": {"n_layers": 3, "d_model": 16, "n_heads": 2, "d_ff": 32, "vocab_size": 512, "max_seq_len": 96},
  "pretrain": {"corpus_docs": 200, "held_out_docs": 40, "mlm": {"steps": 20, "batch_size": 8}},
  "task": {"pool_size": 200, "test_size": 60, "shots": 16, "dev_size": 24},
  "train": {"budget": {"steps": 12}, "eval_every": 6, "batch_size": 8},
  "analysis": {
    "probe": {"steps": 20},
    "probe_train": 60,
    "probe_held_out": 40,
    "bench": {"seq_len": 24, "batch_size": 2, "steps": 5, "warmup": 2}
  },
  "seeds": [0, 1]
}"#;

fn lpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpt")).args(args).output().expect("lpt runs")
}

fn ok(args: &[&str]) -> String {
    let out = lpt(args);
    assert!(
        out.status.success(),
        "lpt {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    config: PathBuf,
    backbone: PathBuf,
}

/// One tiny backbone shared by every test in this file.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.json");
        fs::write(&config, TINY).unwrap();
        let backbone = root.join("bb.ckpt");
        ok(&["pretrain-toy", "--config", s(&config), "--out", s(&backbone)]);
        Fixture {
            _dir: dir,
            root,
            config,
            backbone,
        }
    })
}

fn backed<'a>(f: &'a Fixture, sub: &'a str) -> Vec<&'a str> {
    vec![sub, "--config", s(&f.config), "--backbone", s(&f.backbone)]
}

#[test]
fn pretrain_writes_checkpoint_stats_and_config() {
    let f = fixture();
    let bb = late_prompt::checkpoint::load_backbone(&f.backbone).unwrap();
    assert_eq!(bb.config.n_layers, 3);
    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.backbone.with_extension("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["docs"], 200);
    assert!(stats["trained"]["loss"].as_f64().unwrap() < stats["initial"]["loss"].as_f64().unwrap());
    let snap: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.backbone.with_extension("config.json")).unwrap()).unwrap();
    assert_eq!(snap["pretrain"]["mlm"]["steps"], 20);
    assert_eq!(snap["train"]["peak_lr"], 5e-3, "unset fields are echoed with their defaults");
}

#[test]
fn pretrain_with_a_seed_is_byte_identical() {
    let f = fixture();
    let a = f.root.join("seeded-a.ckpt");
    let b = f.root.join("seeded-b.ckpt");
    for out in [&a, &b] {
        ok(&["pretrain-toy", "--config", s(&f.config), "--out", s(out), "--seed", "7"]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&f.backbone).unwrap());
}

#[test]
fn missing_config_names_the_path() {
    let out = lpt(&["pretrain-toy", "--config", "/definitely/not/here.json", "--out", "/tmp/never.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("lpt: error[io]: "), "{err}");
    assert!(err.contains("/definitely/not/here.json"), "{err}");
    assert_eq!(err.matches("No such file").count(), 1, "{err}");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let f = fixture();
    let bad = f.root.join("bad.json");
    fs::write(&bad, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = lpt(&["pretrain-toy", "--config", s(&bad), "--out", s(&f.root.join("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error[config]") && err.contains("learning_rate"), "{err}");
}

#[test]
fn train_writes_per_seed_records_and_a_summary() {
    let f = fixture();
    let out = f.root.join("train-npg");
    let mut args = backed(f, "train");
    args.extend(["--method", "NPG", "--layer", "2", "--out", s(&out)]);
    let stdout = ok(&args);
    assert!(stdout.contains("seed 0") && stdout.contains("seed 1"), "{stdout}");
    for seed in [0, 1] {
        let dir = out.join(format!("seed-{seed}"));
        let record: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("record.json")).unwrap()).unwrap();
        assert_eq!(record["prompt"]["method"], "NPG");
        assert_eq!(record["prompt"]["k"], 2);
        assert_eq!(record["train"]["seed"], seed);
        assert_eq!(record["losses"].as_array().unwrap().len(), 12);
        assert!(dir.join("best.ckpt").is_file());
    }
    let mut rows = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    assert_eq!(&headers[0], "method");
    let row = rows.records().next().unwrap().unwrap();
    assert_eq!(&row[0], "NPG");
    assert_eq!(&row[1], "2");
    assert_eq!(&row[4], "2");
}

#[test]
fn pt_at_a_late_layer_is_rejected_before_loading() {
    let out = lpt(&["train", "--backbone", "/no/such.ckpt", "--method", "PT", "--layer", "2"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("lpt: error[usage]"), "{err}");
}

#[test]
fn layer_beyond_depth_is_a_usage_error() {
    let f = fixture();
    let never = f.root.join("never");
    let mut args = backed(f, "train");
    args.extend(["--layer", "4", "--out", s(&never)]);
    let out = lpt(&args);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_has_one_row_per_layer() {
    let f = fixture();
    let out = f.root.join("sweep");
    let mut args = backed(f, "sweep-layer");
    args.extend(["--layers", "1,3", "--seeds", "0", "--out", s(&out)]);
    ok(&args);
    let mut rows = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let layers: Vec<String> = rows.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(layers, ["1", "3"]);
    let runs: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("sweep_runs.json")).unwrap()).unwrap();
    assert_eq!(runs.as_array().unwrap().len(), 2);
}

#[test]
fn bench_reports_every_configuration() {
    let f = fixture();
    let out = f.root.join("bench");
    let mut args = backed(f, "bench");
    args.extend(["--methods", "PT,NPG", "--layers", "2,3", "--out", s(&out)]);
    ok(&args);
    let mut rows = csv::Reader::from_path(out.join("bench.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (layer, backward) = (col("layer"), col("backward_layer_count"));
    let got: Vec<(String, String)> = rows
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[layer].to_string(), r[backward].to_string())
        })
        .collect();
    assert_eq!(got, [("1".into(), "3".into()), ("2".into(), "2".into()), ("3".into(), "1".into())]);
}

#[test]
fn probe_covers_every_layer() {
    let f = fixture();
    let out = f.root.join("mi");
    let mut args = backed(f, "mi-probe");
    args.extend(["--out", s(&out)]);
    ok(&args);
    let profile: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("mi.json")).unwrap()).unwrap();
    let layers = profile["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 3);
    let h = profile["entropy_nats"].as_f64().unwrap();
    for l in layers {
        let mi = l["mi_nats"].as_f64().unwrap();
        assert!((0.0..=h).contains(&mi));
    }
}

#[test]
fn report_aggregates_runs_sorted_by_cost() {
    let f = fixture();
    let dir = f.root.join("report-in");
    for (method, layer) in [("NPG", "2"), ("LATE_NOPG", "2")] {
        let mut args = backed(f, "train");
        let out = dir.join(method);
        args.extend(["--method", method, "--layer", layer, "--seeds", "3", "--out", s(&out)]);
        ok(&args);
    }
    let csv_out = f.root.join("report.csv");
    ok(&["report", "--dir", s(&dir), "--out", s(&csv_out)]);
    let mut rows = csv::Reader::from_path(&csv_out).unwrap();
    let got: Vec<(String, usize)> = rows
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[2].parse().unwrap())
        })
        .collect();
    assert_eq!(got.len(), 2);
    assert!(got[0].1 <= got[1].1, "{got:?}");
    assert_eq!(got[0].0, "LATE_NOPG");
    let printed = ok(&["report", "--dir", s(&dir)]);
    assert_eq!(printed, fs::read_to_string(&csv_out).unwrap());
}

#[test]
fn report_on_an_empty_directory_fails() {
    let f = fixture();
    let empty = f.root.join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = lpt(&["report", "--dir", s(&empty)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[input]"));
}

#[test]
fn export_writes_one_prompt_per_example() {
    let f = fixture();
    let run = f.root.join("export-run");
    let mut args = backed(f, "train");
    args.extend(["--method", "APPG", "--layer", "2", "--seeds", "0", "--out", s(&run)]);
    ok(&args);
    let out = f.root.join("prompts.json");
    let seed_dir = run.join("seed-0");
    let mut args = backed(f, "export-prompts");
    args.extend(["--run", s(&seed_dir), "--out", s(&out), "--limit", "7"]);
    ok(&args);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["method"], "APPG");
    let examples = v["examples"].as_array().unwrap();
    assert_eq!(examples.len(), 7);
    let l = v["prompt_len"].as_u64().unwrap() as usize;
    for e in examples {
        let p = e["prompt"].as_array().unwrap();
        assert_eq!(p.len(), l);
        assert!(p.iter().all(|r| r.as_array().unwrap().len() == 16));
    }
}
