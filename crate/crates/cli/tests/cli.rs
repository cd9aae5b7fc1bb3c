use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: [&str; 8] = [
    "--set",
    "gen.instances=300",
    "--set",
    "embedder.epochs=4",
    "--set",
    "manipulator.epochs=2",
    "--set",
    "ks=[1,5,10]",
];

fn flam(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flam"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .output()
        .expect("spawn flam")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = flam(out, args);
    assert!(
        o.status.success(),
        "flam {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn manifest(out: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap()
}

fn stage_hashes(out: &Path, stage: &str) -> Vec<(String, String)> {
    manifest(out)["stages"][stage]["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| (a["path"].as_str().unwrap().into(), a["sha256"].as_str().unwrap().into()))
        .collect()
}

fn pipeline(out: &Path) {
    ok(out, &["gen-data"]);
    ok(out, &["train-embedders"]);
    ok(out, &["train-manipulator"]);
}

#[test]
fn gen_data_writes_three_feature_files_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gen-data", "--seed", "3"]);
    for f in ["train", "query", "gallery"] {
        let p = dir.path().join(format!("data/{f}.flamfeat"));
        assert_eq!(&std::fs::read(&p).unwrap()[..8], b"FLAMFEAT");
        assert!(stdout.contains(&format!("data/{f}.flamfeat")));
    }
    let first = stage_hashes(dir.path(), "gen-data");
    ok(dir.path(), &["gen-data", "--seed", "3"]);
    assert_eq!(first, stage_hashes(dir.path(), "gen-data"));
    ok(dir.path(), &["gen-data", "--seed", "4"]);
    assert_ne!(first, stage_hashes(dir.path(), "gen-data"));
}

#[test]
fn invalid_fraction_sum_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = flam(dir.path(), &["gen-data", "--set", "split.query=0.5"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("config error") && err.contains("sum"), "{err}");
}

#[test]
fn missing_data_is_a_path_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = flam(dir.path(), &["train-embedders"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.flamfeat"));
}

#[test]
fn unknown_keys_and_bad_configs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(flam(dir.path(), &["gen-data", "--set", "gen.nosie=0"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let o = flam(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(flam(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn config_file_is_read_and_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"gen": {"instances": 250, "views": 3}, "seed": 9}"#).unwrap();
    ok(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    let m = manifest(dir.path());
    // --set gen.instances=300 from the shared flags wins over the file
    assert_eq!(m["config"]["gen"]["instances"], 300);
    assert_eq!(m["config"]["gen"]["views"], 3);
    assert_eq!(m["config"]["seed"], 9);
}

#[test]
fn full_pipeline_and_manipulate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    pipeline(out);

    for a in ["shape", "color", "pattern"] {
        let log: Value =
            serde_json::from_slice(&std::fs::read(out.join(format!("embedders/{a}.flamemb.log.json"))).unwrap())
                .unwrap();
        assert_eq!(log["epoch_loss"].as_array().unwrap().len(), 4);
        let log: Value =
            serde_json::from_slice(&std::fs::read(out.join(format!("manipulators/{a}.flamgan.log.json"))).unwrap())
                .unwrap();
        let epochs = log["epochs"].as_array().unwrap();
        assert_eq!(epochs.len(), 2);
        assert!(epochs.iter().all(|e| e["convergence_proxy"].is_f64()));
    }
    assert_eq!(manifest(out)["stages"]["train-manipulator"]["details"]["variant"], "M/OS/Adv");

    let text = ok(out, &["evaluate"]);
    assert!(text.contains("All"));
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    for key in ["r_at_k", "t_at_k", "probe_delta"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    let names: Vec<&str> = report["t_at_k"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["attr_type"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["shape", "color", "pattern", "All"]);
    let first = stage_hashes(out, "evaluate");
    ok(out, &["evaluate"]);
    assert_eq!(first, stage_hashes(out, "evaluate"));
    assert_eq!(ok(out, &["report"]), std::fs::read_to_string(out.join("report.txt")).unwrap());

    let query = out.join("data/query.flamfeat");
    let q = query.to_str().unwrap();
    let lines = ok(out, &["manipulate", "--input", q, "--attr", "color", "--class", "2", "--k", "7"]);
    let lines: Vec<&str> = lines.lines().collect();
    assert_eq!(lines.len(), 7);
    let mut prev = f64::INFINITY;
    for (i, l) in lines.iter().enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 3, "{l}");
        assert_eq!(f[0].parse::<usize>().unwrap(), i + 1);
        f[1].parse::<u64>().unwrap();
        let s: f64 = f[2].parse().unwrap();
        assert!(s <= prev + 1e-12 && s.abs() <= 1.0 + 1e-6);
        prev = s;
    }

    let bad_class = flam(out, &["manipulate", "--input", q, "--attr", "color", "--class", "10"]);
    assert_eq!(bad_class.status.code(), Some(2));
    let bad_attr = flam(out, &["manipulate", "--input", q, "--attr", "size", "--class", "1"]);
    assert_eq!(bad_attr.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_attr.stderr).contains("size"));
}

#[test]
fn variant_flag_is_recorded_and_sweep_compares_variants() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["gen-data"]);
    ok(out, &["train-embedders"]);
    ok(out, &["train-manipulator", "--variant", "S/-/Adv"]);
    let details = &manifest(out)["stages"]["train-manipulator"]["details"];
    assert_eq!(details["variant"], "S/-/Adv");
    assert_eq!(details["matching"], "S");
    assert_eq!(details["sampling"], "uniform");
    assert_eq!(flam(out, &["train-manipulator", "--variant", "Q/OS/Adv"]).status.code(), Some(2));

    let table = ok(out, &["evaluate", "--sweep", "--set", "sweep_variants=[\"M/OS/Adv\",\"M/-/-\"]"]);
    // table first, then the artifact hashes
    let rows: Vec<&str> = table.lines().take(3).collect();
    assert!(rows[0].starts_with("variant"), "{table}");
    assert!(rows[1].starts_with("M/OS/Adv") && rows[2].starts_with("M/-/-"));
    assert!(out.join("sweep.json").exists());
}

#[test]
fn nan_loss_exits_with_training_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["gen-data"]);
    ok(out, &["train-embedders"]);
    let o = flam(out, &["train-manipulator", "--set", "manipulator.lr=1e300"]);
    assert_eq!(o.status.code(), Some(4));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("diverged") && err.contains("epoch"), "{err}");
}

#[test]
fn every_stage_reproduces_its_hashes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        pipeline(dir);
        ok(dir, &["evaluate"]);
    }
    for stage in ["gen-data", "train-embedders", "train-manipulator", "evaluate"] {
        assert_eq!(stage_hashes(a.path(), stage), stage_hashes(b.path(), stage), "{stage}");
    }
}
