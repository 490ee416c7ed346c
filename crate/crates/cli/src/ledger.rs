//! Append-only record of completed stages.
//!
//! `ledger.toml` in the output directory holds the config digest, the cache
//! root and, per completed stage, the SHA-256 of every file it produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tapm_core::rng;

use crate::error::{CliError, Result};

pub const FILE: &str = "ledger.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub name: String,
    /// Output path relative to the run directory, mapped to its digest.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunLedger {
    pub config_digest: String,
    pub cache_dir: String,
    pub stages: Vec<StageRecord>,
    #[serde(skip)]
    root: PathBuf,
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(rng::digest(&std::fs::read(path)?))
}

/// Writes `bytes` through a temporary file so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

impl RunLedger {
    /// Opens the ledger of `root`, creating it when absent. An existing
    /// ledger written under another config is an error.
    pub fn open(root: &Path, config_digest: &str, cache_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let path = root.join(FILE);
        let cache_dir = cache_dir.display().to_string();
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let mut l: RunLedger = toml::from_str(&text).map_err(|e| CliError::Ledger(format!("{}: {e}", path.display())))?;
            if l.config_digest != config_digest {
                return Err(CliError::Ledger(format!(
                    "{} was written under config {}, current config is {}",
                    path.display(),
                    &l.config_digest[..12],
                    &config_digest[..12]
                )));
            }
            l.root = root.to_path_buf();
            if l.cache_dir != cache_dir {
                l.cache_dir = cache_dir;
                l.save()?;
            }
            return Ok(l);
        }
        let l = RunLedger {
            config_digest: config_digest.to_string(),
            cache_dir,
            stages: Vec::new(),
            root: root.to_path_buf(),
        };
        l.save()?;
        Ok(l)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn save(&self) -> Result<()> {
        write_atomic(&self.root.join(FILE), toml::to_string(self)?.as_bytes())
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn is_complete(&self, name: &str) -> bool {
        self.stage(name).is_some()
    }

    /// Errors unless `needs` has completed.
    pub fn require(&self, stage: &str, needs: &str) -> Result<()> {
        if self.is_complete(needs) {
            Ok(())
        } else {
            Err(CliError::Dependency {
                stage: stage.to_string(),
                needs: needs.to_string(),
            })
        }
    }

    /// Checks the recorded outputs of a completed stage against the files on
    /// disk.
    pub fn verify(&self, name: &str) -> Result<()> {
        let rec = self
            .stage(name)
            .ok_or_else(|| CliError::Ledger(format!("stage `{name}` is not recorded")))?;
        for (rel, want) in &rec.outputs {
            let p = self.root.join(rel);
            if !p.exists() {
                return Err(CliError::Ledger(format!("output {rel} of stage `{name}` is missing")));
            }
            if &file_digest(&p)? != want {
                return Err(CliError::Ledger(format!("output {rel} of stage `{name}` was modified")));
            }
        }
        Ok(())
    }

    /// Records `name` with the digests of `outputs` (paths relative to the
    /// run directory).
    pub fn complete(&mut self, name: &str, outputs: &[String]) -> Result<()> {
        if self.is_complete(name) {
            return Err(CliError::Ledger(format!("stage `{name}` is already recorded")));
        }
        let mut rec = StageRecord {
            name: name.to_string(),
            outputs: BTreeMap::new(),
        };
        for rel in outputs {
            rec.outputs.insert(rel.clone(), file_digest(&self.root.join(rel))?);
        }
        self.stages.push(rec);
        self.save()
    }
}
