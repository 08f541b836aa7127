//! Config-driven experiment runner behind the `langevin-kit` binary.

pub mod config;
pub mod experiments;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{ExperimentConfig, ExperimentKind};
pub use experiments::{execute, Outcome, ResultRow, CSV_COLUMNS, CSV_SCHEMA_VERSION};

/// Process exit statuses.
pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub const THREADS_ENV: &str = "LANGEVIN_KIT_THREADS";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot write output directory {path}: {reason}")]
    Output { path: PathBuf, reason: String },
    #[error("experiment failed: {0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Output { .. } => EXIT_CONFIG,
            CliError::Run(_) => EXIT_FAIL,
        }
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    library_version: &'static str,
    csv_schema_version: u32,
    csv_columns: [&'static str; 5],
    seed: u64,
    input_hash: String,
    wall_time_seconds: f64,
    passed: bool,
    error: Option<String>,
    notes: &'a [String],
    config: &'a ExperimentConfig,
}

/// Report of a finished `run`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output: PathBuf,
    pub passed: bool,
    pub notes: Vec<String>,
}

/// Git-style content hash: SHA-256 of `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads and validates a config (or a previous run's `meta.json`), applying the overrides.
pub fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(CliError::Config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output = o;
    }
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

pub fn write_csv(rows: &[ResultRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Run(format!("csv encoding: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::Run(format!("csv encoding: {e}")))
}

fn output_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Output { path: path.to_path_buf(), reason: e.to_string() }
}

/// Runs a validated config and writes `results.csv` and `meta.json` to its output directory.
pub fn run_config(cfg: &ExperimentConfig) -> Result<RunSummary, CliError> {
    let dir = &cfg.output;
    fs::create_dir_all(dir).map_err(|e| output_error(dir, e))?;
    let probe = dir.join(".write-test");
    fs::write(&probe, b"").map_err(|e| output_error(dir, e))?;
    fs::remove_file(&probe).map_err(|e| output_error(dir, e))?;

    let canonical = serde_json::to_vec(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let started = Instant::now();
    let result = execute(cfg);
    let wall = started.elapsed().as_secs_f64();

    let (rows, passed, notes, error) = match result {
        Ok(o) => (o.rows, o.passed, o.notes, None),
        Err(e) => (Vec::new(), false, Vec::new(), Some(e.to_string())),
    };
    let csv = write_csv(&rows)?;
    fs::write(dir.join("results.csv"), csv).map_err(|e| output_error(dir, e))?;
    let meta = Meta {
        library_version: env!("CARGO_PKG_VERSION"),
        csv_schema_version: CSV_SCHEMA_VERSION,
        csv_columns: CSV_COLUMNS,
        seed: cfg.seed,
        input_hash: format!("sha256:{}", content_hash(&canonical)),
        wall_time_seconds: wall,
        passed,
        error: error.clone(),
        notes: &notes,
        config: cfg,
    };
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| CliError::Run(e.to_string()))?;
    fs::write(dir.join("meta.json"), json).map_err(|e| output_error(dir, e))?;
    if let Some(e) = error {
        return Err(CliError::Run(e));
    }
    Ok(RunSummary { output: dir.clone(), passed, notes })
}

/// Caps the global worker pool at `LANGEVIN_KIT_THREADS` when set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    // A pool built earlier in the process stays in place.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_blob_format() {
        // `printf 'hello\n' | git hash-object --stdin` under SHA-256 object format.
        assert_eq!(content_hash(b"hello\n"), "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
    }

    #[test]
    fn csv_leaves_missing_error_empty() {
        let rows = vec![ResultRow { gamma: 0.1, probe_point: "a,b".into(), statistic: "s".into(), value: 1.5, std_error: None }];
        let text = String::from_utf8(write_csv(&rows).unwrap()).unwrap();
        assert_eq!(text, "gamma,probe_point,statistic,value,std_error\n0.1,\"a,b\",s,1.5,\n");
    }
}
