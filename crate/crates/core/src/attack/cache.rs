//! Content-addressed on-disk store of generated adversarial sets.
//!
//! One directory per manifest digest:
//!
//! ```text
//! <root>/<digest[..16]>/manifest.toml
//! <root>/<digest[..16]>/v0.bin ... v{versions-1}.bin
//! ```
//!
//! Blobs use the checkpoint format with a single tensor named `x_adv`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Algorithm, AttackSpec};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheManifest {
    /// Hash of the dataset the rows were taken from.
    pub dataset: String,
    pub source: String,
    pub algorithm: Algorithm,
    pub eps: f64,
    pub steps: usize,
    #[serde(with = "rng::seed_serde")]
    pub seed: u64,
    pub versions: usize,
    pub rows: usize,
    /// Largest cache-time pad-crop shift in pixels (0 disables it).
    pub shift: usize,
    pub spec: AttackSpec,
}

impl CacheManifest {
    pub fn new(dataset: &str, spec: &AttackSpec, seed: u64, versions: usize, rows: usize, shift: usize) -> Self {
        CacheManifest {
            dataset: dataset.to_string(),
            source: spec.source_label(),
            algorithm: spec.config.algorithm,
            eps: spec.config.eps,
            steps: spec.config.steps,
            seed,
            versions,
            rows,
            shift,
            spec: spec.clone(),
        }
    }

    pub fn digest(&self) -> Result<String> {
        Ok(rng::digest(toml::to_string(self)?.as_bytes()))
    }

    /// Seed of version `v`.
    pub fn version_seed(&self, v: usize) -> u64 {
        rng::derive_seed(self.seed, &[&self.spec.id(), "version", &v.to_string()])
    }
}

/// All versions of one (source, algorithm) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackCache {
    pub manifest: CacheManifest,
    pub versions: Vec<Tensor>,
    /// SHA-256 of each encoded blob.
    pub digests: Vec<String>,
}

fn encode_blob(x: &Tensor) -> Result<Vec<u8>> {
    checkpoint::encode(&[("x_adv".to_string(), x.clone())])
}

fn decode_blob(bytes: &[u8]) -> Result<Tensor> {
    let mut t = checkpoint::decode(bytes)?;
    match (t.len(), t.pop()) {
        (1, Some((name, x))) if name == "x_adv" => Ok(x),
        _ => Err(Error::Cache("blob must hold exactly one tensor named x_adv".into())),
    }
}

impl AttackCache {
    /// Builds every version in memory.
    pub fn generate<F>(manifest: CacheManifest, gen: F) -> Result<Self>
    where
        F: Fn(usize) -> Result<Tensor> + Sync,
    {
        if manifest.versions == 0 {
            return Err(Error::invalid("a cache needs at least one version"));
        }
        let versions = (0..manifest.versions)
            .into_par_iter()
            .map(&gen)
            .collect::<Result<Vec<_>>>()?;
        let digests = versions
            .iter()
            .map(|v| Ok(rng::digest(&encode_blob(v)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(AttackCache {
            manifest,
            versions,
            digests,
        })
    }
}

/// Root directory of the on-disk cache.
#[derive(Debug, Clone)]
pub struct CacheStore {
    root: PathBuf,
}

impl CacheStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CacheStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir_for(&self, manifest: &CacheManifest) -> Result<PathBuf> {
        Ok(self.root.join(&manifest.digest()?[..16]))
    }

    /// Returns the cached versions, generating and storing any that are
    /// missing. A directory whose manifest differs is a collision.
    pub fn load_or_generate<F>(&self, manifest: CacheManifest, gen: F) -> Result<AttackCache>
    where
        F: Fn(usize) -> Result<Tensor> + Sync,
    {
        if manifest.versions == 0 {
            return Err(Error::invalid("a cache needs at least one version"));
        }
        let dir = self.dir_for(&manifest)?;
        std::fs::create_dir_all(&dir)?;
        let mpath = dir.join("manifest.toml");
        if mpath.exists() {
            let found: CacheManifest = toml::from_str(&std::fs::read_to_string(&mpath)?)
                .map_err(|e| Error::Cache(format!("{}: {e}", mpath.display())))?;
            if found != manifest {
                return Err(Error::Cache(format!(
                    "{} holds a different manifest (source {}, algorithm {})",
                    dir.display(),
                    found.source,
                    found.algorithm
                )));
            }
        } else {
            std::fs::write(&mpath, toml::to_string(&manifest)?)?;
        }
        let blobs = (0..manifest.versions)
            .into_par_iter()
            .map(|v| {
                let path = dir.join(format!("v{v}.bin"));
                if path.exists() {
                    let bytes = std::fs::read(&path)?;
                    let x = decode_blob(&bytes)?;
                    if x.rows() != manifest.rows {
                        return Err(Error::Cache(format!("{} has {} rows, expected {}", path.display(), x.rows(), manifest.rows)));
                    }
                    return Ok((x, rng::digest(&bytes)));
                }
                let x = gen(v)?;
                let bytes = encode_blob(&x)?;
                let tmp = dir.join(format!("v{v}.bin.tmp"));
                std::fs::write(&tmp, &bytes)?;
                std::fs::rename(&tmp, &path)?;
                Ok((x, rng::digest(&bytes)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (versions, digests) = blobs.into_iter().unzip();
        Ok(AttackCache {
            manifest,
            versions,
            digests,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackConfig;

    fn manifest() -> CacheManifest {
        let spec = AttackSpec::new("m", AttackConfig::new(Algorithm::Pgd, 0.03, 10));
        CacheManifest::new("data", &spec, 1, 2, 3, 0)
    }

    fn gen(v: usize) -> Result<Tensor> {
        Ok(Tensor::full(&[3, 2], v as f64 / 4.0))
    }

    #[test]
    fn store_roundtrip_and_reuse() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::new(dir.path());
        let a = store.load_or_generate(manifest(), gen).unwrap();
        let b = store
            .load_or_generate(manifest(), |_| Err(Error::invalid("should not regenerate")))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, AttackCache::generate(manifest(), gen).unwrap());
    }

    #[test]
    fn missing_versions_are_filled_in() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::new(dir.path());
        let a = store.load_or_generate(manifest(), gen).unwrap();
        std::fs::remove_file(store.dir_for(&manifest()).unwrap().join("v1.bin")).unwrap();
        let b = store.load_or_generate(manifest(), gen).unwrap();
        assert_eq!(a.digests, b.digests);
    }

    #[test]
    fn mismatched_manifest_is_a_collision() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::new(dir.path());
        let m = manifest();
        let d = store.dir_for(&m).unwrap();
        std::fs::create_dir_all(&d).unwrap();
        let mut other = m.clone();
        other.seed = 99;
        std::fs::write(d.join("manifest.toml"), toml::to_string(&other).unwrap()).unwrap();
        assert!(matches!(store.load_or_generate(m, gen), Err(Error::Cache(_))));
    }

    #[test]
    fn zero_versions_rejected() {
        let mut m = manifest();
        m.versions = 0;
        assert!(AttackCache::generate(m, gen).is_err());
    }
}
