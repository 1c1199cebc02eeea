//! JSON record of one pipeline step: what ran, with which settings, and
//! what it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub role: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Full effective configuration as TOML; feeding it back reproduces the
    /// run.
    pub config: String,
    /// Command-line overrides applied on top of the config file.
    pub overrides: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub exit_code: i32,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn start(subcommand: &str, config: &Config, overrides: &[String]) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: unix_now(),
            finished_unix: 0,
            config: config.to_toml(),
            overrides: overrides.to_vec(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            exit_code: 0,
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.inputs.push(Artifact { role: role.into(), path: path.to_path_buf() });
    }

    pub fn output(&mut self, role: &str, path: &Path) {
        self.outputs.push(Artifact { role: role.into(), path: path.to_path_buf() });
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.into(), seed);
    }

    pub fn snapshot(&self) -> Result<Config> {
        Config::from_toml(&self.config)
    }

    /// Paths listed as outputs that do not exist.
    pub fn missing_outputs(&self) -> Vec<PathBuf> {
        self.outputs.iter().filter(|a| !a.path.exists()).map(|a| a.path.clone()).collect()
    }

    /// Stamps the finish time and writes `manifest_<subcommand>.json` into
    /// `dir`, after checking every listed output exists.
    pub fn finish(mut self, dir: &Path, exit_code: i32) -> Result<PathBuf> {
        self.finished_unix = unix_now();
        self.exit_code = exit_code;
        if let Some(p) = self.missing_outputs().first() {
            return Err(Error::MissingFile(p.clone()));
        }
        let path = dir.join(format!("manifest_{}.json", self.subcommand));
        std::fs::write(&path, serde_json::to_string_pretty(&self)?)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
