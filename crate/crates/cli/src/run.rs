use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use svimo::config::RunConfig;
use svimo::synth_data::sha256_hex;
use svimo::tensor_io::write_atomic;
use svimo::{Error, Result};

pub const SEED_ENV: &str = "SVIMO_SEED";

/// Print one structured record, to stderr when `err`.
pub fn emit(record: &serde_json::Value, err: bool) {
    let line = record.to_string();
    if err {
        eprintln!("{line}");
    } else {
        println!("{line}");
    }
}

/// Resolve the configuration: file, then `--set` overrides, then the seed variable.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<(RunConfig, &'static str)> {
    let mut cfg = RunConfig::load(path, overrides)?;
    let env = std::env::var(SEED_ENV).ok();
    let source = if env.is_some() { "env" } else { "config" };
    cfg.apply_seed_override(env.as_deref())?;
    cfg.validate()?;
    Ok((cfg, source))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    argv: Vec<String>,
    seed: u64,
    seed_source: &'a str,
    /// Input name → sha256 of its identifying bytes.
    inputs: &'a BTreeMap<String, String>,
    version: &'static str,
}

/// A run directory with its resolved config, provenance record and step log.
pub struct RunDir {
    pub root: PathBuf,
    log: File,
}

impl RunDir {
    pub fn create(
        root: &Path,
        command: &str,
        cfg: &RunConfig,
        seed_source: &str,
        inputs: &BTreeMap<String, String>,
    ) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        write_atomic(&root.join("config.toml"), cfg.to_toml()?.as_bytes())?;
        let record = RunRecord {
            command,
            argv: std::env::args().collect(),
            seed: cfg.seed,
            seed_source,
            inputs,
            version: env!("CARGO_PKG_VERSION"),
        };
        write_atomic(&root.join("run.json"), &serde_json::to_vec_pretty(&record)?)?;
        let log = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(root.join("log.jsonl"))?;
        Ok(Self { root: root.to_path_buf(), log })
    }

    /// Append to the run log and echo to stdout.
    pub fn log(&mut self, record: serde_json::Value) -> Result<()> {
        writeln!(self.log, "{record}")?;
        emit(&record, false);
        Ok(())
    }
}

/// Hash of a file, or a missing-artifact error naming it.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Ok(sha256_hex(&bytes))
}
