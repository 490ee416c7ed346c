//! The public-model zoo: specs, building and on-disk manifests.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{Architecture, Network};
use crate::rng;
use crate::train::{self, ModelGroup, TrainConfig, TrainedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooEntry {
    pub arch: Architecture,
    pub group: ModelGroup,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZooSpec {
    pub models: Vec<ZooEntry>,
    pub train: TrainConfig,
    /// Overrides `train` for the adversarial groups when set.
    pub adv_train: Option<TrainConfig>,
}

impl Default for ZooSpec {
    fn default() -> Self {
        use Architecture::*;
        use ModelGroup::*;
        let rows = [
            (CnnSmall, Normal, 1),
            (MlpWide, Normal, 2),
            (CnnSmall, LinfAdv, 3),
            (MlpWide, LinfAdv, 4),
            (CnnDeep, L2Adv, 5),
            (MlpSmall, L2Adv, 6),
            (CnnDeep, Corruption, 7),
            (MixerLite, Corruption, 8),
        ];
        ZooSpec {
            models: rows
                .into_iter()
                .map(|(arch, group, seed)| ZooEntry { arch, group, seed })
                .collect(),
            train: TrainConfig::default(),
            adv_train: None,
        }
    }
}

impl ZooSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.models {
            if !seen.insert((e.arch, e.seed, e.group)) {
                return Err(Error::invalid(format!(
                    "duplicate zoo row ({}, {}, seed {})",
                    e.arch, e.group, e.seed
                )));
            }
        }
        self.train.validate()?;
        if let Some(c) = &self.adv_train {
            c.validate()?;
        }
        Ok(())
    }

    pub fn config_for(&self, group: ModelGroup) -> &TrainConfig {
        match (group, &self.adv_train) {
            (ModelGroup::LinfAdv | ModelGroup::L2Adv, Some(c)) => c,
            _ => &self.train,
        }
    }
}

pub fn model_id(e: &ZooEntry) -> String {
    format!("{}-{}-s{}", e.arch, e.group, e.seed)
}

/// Trains every zoo row. Rows train independently, so the result does not
/// depend on the worker count.
pub fn build_zoo(data: &Dataset, spec: &ZooSpec, seed: u64) -> Result<Vec<TrainedModel>> {
    spec.validate()?;
    spec.models
        .par_iter()
        .map(|e| {
            let id = model_id(e);
            let s = rng::derive_seed(seed, &["zoo", &id]);
            let mut m = train::train_model(e.arch, e.group, data, spec.config_for(e.group), s)?;
            m.id = id;
            m.seed = e.seed;
            Ok(m)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub architecture: Architecture,
    pub group: ModelGroup,
    pub seed: u64,
    pub checkpoint: String,
    pub clean_accuracy: f64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ZooManifest {
    pub dataset: String,
    pub models: Vec<ManifestEntry>,
}

/// Writes one checkpoint per model plus `manifest.toml` into `dir`.
pub fn save_zoo(dir: &Path, models: &[TrainedModel], test: &Dataset) -> Result<ZooManifest> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = ZooManifest {
        dataset: test.spec_hash.clone(),
        models: Vec::new(),
    };
    for m in models {
        let file = format!("{}.ckpt", m.id);
        checkpoint::write(&dir.join(&file), &m.net.params)?;
        manifest.models.push(ManifestEntry {
            id: m.id.clone(),
            architecture: m.arch(),
            group: m.group,
            seed: m.seed,
            checkpoint: file,
            clean_accuracy: eval::clean_accuracy(m, test)?,
            config: m.config.clone(),
        });
    }
    std::fs::write(dir.join("manifest.toml"), toml::to_string(&manifest)?)?;
    Ok(manifest)
}

pub fn load_zoo(dir: &Path, input_shape: [usize; 3], classes: usize) -> Result<(ZooManifest, Vec<TrainedModel>)> {
    let text = std::fs::read_to_string(dir.join("manifest.toml"))?;
    let manifest: ZooManifest = toml::from_str(&text)?;
    let models = manifest
        .models
        .iter()
        .map(|e| {
            let params = checkpoint::read(&dir.join(&e.checkpoint))?;
            Ok(TrainedModel {
                id: e.id.clone(),
                group: e.group,
                seed: e.seed,
                config: e.config.clone(),
                net: Network::with_params(e.architecture, input_shape, classes, params)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, models))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_covers_every_group_twice() {
        let s = ZooSpec::default();
        assert_eq!(s.models.len(), 8);
        for g in ModelGroup::ALL {
            assert_eq!(s.models.iter().filter(|e| e.group == g).count(), 2);
        }
        assert!(s.validate().is_ok());
    }

    #[test]
    fn duplicate_rows_are_rejected() {
        let mut s = ZooSpec::default();
        s.models.push(s.models[0].clone());
        assert!(s.validate().is_err());
    }
}
