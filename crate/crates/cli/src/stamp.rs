//! Reproducibility stamps written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use quicktext::hashing::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Hash of the manifest or of the command's effective arguments.
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub created_utc: String,
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

impl Stamp {
    pub fn new(command: &str, seed: Option<u64>, config_hash: String) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_hash,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            created_utc: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        }
    }

    /// Hash of `key=value` argument pairs in sorted order.
    pub fn args_hash(args: &BTreeMap<&str, String>) -> String {
        let text: Vec<String> = args.iter().map(|(k, v)| format!("{k}={v}")).collect();
        sha256_hex(text.join("\n").as_bytes())
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    pub fn outputs(&mut self, paths: &[PathBuf]) -> Result<()> {
        for p in paths {
            self.outputs.insert(p.display().to_string(), file_hash(p)?);
        }
        Ok(())
    }

    /// Writes `stamp-<command>.json` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("stamp-{}.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}
