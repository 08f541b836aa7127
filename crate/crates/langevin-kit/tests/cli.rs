use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

use langevin_kit::cli::{load_config, run_config, CSV_COLUMNS, CSV_SCHEMA_VERSION};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_langevin-kit"))
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(config: &Path, out: &Path) -> Output {
    bin().arg("run").arg(config).arg("--out").arg(out).output().unwrap()
}

fn simulate_config() -> Value {
    json!({
        "experiment": "simulate",
        "scheme": {"kind": "em", "gamma": 0.1},
        "potential": {"kind": "quadratic"},
        "seed": 42,
        "monte_carlo": {"steps": 100, "ensemble": 8}
    })
}

#[test]
fn same_config_gives_identical_csv() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sim.json", &simulate_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = run(&cfg, out);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("results.csv")).unwrap());
    let header = String::from_utf8_lossy(&csv).lines().next().unwrap().to_string();
    assert_eq!(header, CSV_COLUMNS.join(","));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sim.json", &simulate_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&cfg, &a);
    let o = bin().arg("run").arg(&cfg).args(["--seed", "43", "--out"]).arg(&b).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(fs::read(a.join("results.csv")).unwrap(), fs::read(b.join("results.csv")).unwrap());
    let meta: Value = serde_json::from_slice(&fs::read(b.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 43);
}

#[test]
fn covariance_error_halves_with_step() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "cov.json",
        &json!({
            "experiment": "covariance-check",
            "scheme": {"kind": "em", "gamma_grid": [0.05, 0.025, 0.0125]},
            "probe": {"t0": 0.5}
        }),
    );
    let out = tmp.path().join("out");
    let o = run(&cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut reader = csv::Reader::from_path(out.join("results.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.iter().filter(|r| &r[2] == "max_abs_error").count(), 3);
    let ratios: Vec<f64> = rows.iter().filter(|r| &r[2] == "error_ratio").map(|r| r[3].parse().unwrap()).collect();
    assert_eq!(ratios.len(), 2);
    for r in ratios {
        assert!((1.5..=2.5).contains(&r), "{r}");
    }
}

#[test]
fn negative_step_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let mut bad = simulate_config();
    bad["scheme"]["gamma"] = json!(-0.1);
    let cfg = write_config(tmp.path(), "bad.json", &bad);
    let o = run(&cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("scheme.gamma"));
    let v = bin().arg("validate").arg(&cfg).output().unwrap();
    assert_eq!(v.status.code(), Some(2));
}

#[test]
fn unknown_experiment_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let mut bad = simulate_config();
    bad["experiment"] = json!("teleport");
    let cfg = write_config(tmp.path(), "bad.json", &bad);
    let o = run(&cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("teleport"));
}

#[test]
fn unwritable_output_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sim.json", &simulate_config());
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = run(&cfg, &blocker.join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validate_accepts_good_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sim.json", &simulate_config());
    let o = bin().arg("validate").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn meta_reproduces_results() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sim.json", &simulate_config());
    let first = tmp.path().join("first");
    run(&cfg, &first);
    let meta_path = first.join("meta.json");
    let meta: Value = serde_json::from_slice(&fs::read(&meta_path).unwrap()).unwrap();
    assert_eq!(meta["csv_schema_version"], CSV_SCHEMA_VERSION);
    assert!(meta["input_hash"].as_str().unwrap().starts_with("sha256:"));
    assert_eq!(meta["passed"], true);

    let second = tmp.path().join("second");
    let o = run(&meta_path, &second);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(first.join("results.csv")).unwrap(), fs::read(second.join("results.csv")).unwrap());
    let mut again: Value = serde_json::from_slice(&fs::read(second.join("meta.json")).unwrap()).unwrap();
    let mut before = meta["config"].clone();
    before["output"] = Value::Null;
    again["config"]["output"] = Value::Null;
    assert_eq!(again["config"], before);
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sim.json", &simulate_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&cfg, &a);
    let o = bin().env("LANGEVIN_KIT_THREADS", "1").arg("run").arg(&cfg).arg("--out").arg(&b).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(a.join("results.csv")).unwrap(), fs::read(b.join("results.csv")).unwrap());
    let bad = bin().env("LANGEVIN_KIT_THREADS", "zero").arg("run").arg(&cfg).arg("--out").arg(&b).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn concurrent_runs_match_sequential_runs() {
    let tmp = TempDir::new().unwrap();
    let mut other = simulate_config();
    other["scheme"]["kind"] = json!("abcba");
    other["seed"] = json!(7);
    let paths = [
        write_config(tmp.path(), "one.json", &simulate_config()),
        write_config(tmp.path(), "two.json", &other),
    ];
    let load = |i: usize, tag: &str| load_config(&paths[i], None, Some(tmp.path().join(format!("{tag}{i}")))).unwrap();

    for i in 0..2 {
        run_config(&load(i, "seq")).unwrap();
    }
    let configs = [load(0, "par"), load(1, "par")];
    std::thread::scope(|s| {
        for cfg in &configs {
            s.spawn(move || run_config(cfg).unwrap());
        }
    });
    for i in 0..2 {
        let seq = fs::read(tmp.path().join(format!("seq{i}/results.csv"))).unwrap();
        let par = fs::read(tmp.path().join(format!("par{i}/results.csv"))).unwrap();
        assert_eq!(seq, par);
    }
}
