//! `run.meta`: resolved config plus a `[provenance]` table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thermotomo::{Error, Result};

use crate::config::{RunConfig, PROVENANCE_KEY};

pub const RUN_META_FILE: &str = "run.meta";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Input path to sha256 hex digest.
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn start(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            started_unix: unix_now(),
            finished_unix: 0.0,
            inputs: BTreeMap::new(),
        }
    }

    /// Records a file, or every regular file of a directory in name order.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let meta = std::fs::metadata(path).map_err(|e| io_err(path, e))?;
        if meta.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| io_err(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for f in files {
                self.inputs.insert(f.display().to_string(), file_digest(&f)?);
            }
        } else {
            self.inputs
                .insert(path.display().to_string(), file_digest(path)?);
        }
        Ok(())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn render(cfg: &RunConfig, prov: &Provenance) -> Result<String> {
    let mut table = toml::Table::try_from(cfg).map_err(|e| Error::Domain(e.to_string()))?;
    let p = toml::Table::try_from(prov).map_err(|e| Error::Domain(e.to_string()))?;
    table.insert(PROVENANCE_KEY.into(), toml::Value::Table(p));
    toml::to_string(&table).map_err(|e| Error::Domain(e.to_string()))
}

/// Stamps the finish time and writes `out_dir/run.meta`.
pub fn write_run_meta(out_dir: &Path, cfg: &RunConfig, mut prov: Provenance) -> Result<PathBuf> {
    prov.finished_unix = unix_now();
    let path = out_dir.join(RUN_META_FILE);
    std::fs::write(&path, render(cfg, &prov)?).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

#[cfg(test)]
pub fn read_run_meta(path: &Path) -> Result<(RunConfig, Provenance)> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let cfg = RunConfig::resolve(Some(&text), &[])?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config {
        key: RUN_META_FILE.into(),
        message: e.to_string(),
    })?;
    let prov = table
        .remove(PROVENANCE_KEY)
        .ok_or_else(|| Error::Config {
            key: PROVENANCE_KEY.into(),
            message: "missing".into(),
        })?
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config {
            key: PROVENANCE_KEY.into(),
            message: e.to_string(),
        })?;
    Ok((cfg, prov))
}
