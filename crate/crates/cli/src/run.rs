//! Run directory layout, dependency checks and stage metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tafnet::config::Config;

use crate::error::{CliError, Result};

pub struct RunContext {
    pub out: PathBuf,
    pub cfg: Config,
    pub workers: usize,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    stage: &'a str,
    seed: u64,
    config_hash: String,
    versions: BTreeMap<&'static str, &'static str>,
    workers: usize,
}

pub fn versions() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        ("tafnet", tafnet::VERSION),
        ("tafnet-nn", tafnet_nn::VERSION),
        ("tafnet-cli", env!("CARGO_PKG_VERSION")),
        ("rng", tafnet::rng::ALGORITHM),
        ("volume_format", "TAFVOL01"),
        ("checkpoint_format", "TAFCKPT1"),
    ])
}

impl RunContext {
    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    /// Creates the stage directory and writes `run.json` and `config.txt`.
    pub fn begin(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
        let meta = RunMeta { stage, seed: self.cfg.seed(), config_hash: self.cfg.hash(), versions: versions(), workers: self.workers };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| CliError::Input(e.to_string()))?;
        write(&dir.join("run.json"), &json)?;
        write(&dir.join("config.txt"), &self.cfg.to_text())?;
        Ok(dir)
    }

    /// Path of an artifact produced by `stage`, or a dependency error naming it.
    pub fn require(&self, stage: &'static str, file: &str) -> Result<PathBuf> {
        let p = self.stage_dir(stage).join(file);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Dependency { stage, path: p })
        }
    }
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(CliError::io(path))
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(CliError::csv(path))
}
