//! Content-addressed artifact store backing pipeline resumption.
//!
//! Every artifact a stage writes is hashed and recorded in the run
//! manifest. On a resumed run, an artifact whose file matches its recorded
//! hash is reused; a mismatch is a stale-artifact error; a missing file is
//! recomputed, which by determinism regenerates it bit-identically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.csv";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub stage: String,
    pub path: String,
    pub hash: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: super::PipelineConfig,
    pub entries: Vec<ManifestEntry>,
}

impl RunManifest {
    pub fn entry(&self, path: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.path == path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

pub struct Store {
    root: PathBuf,
    config: super::PipelineConfig,
    prev: BTreeMap<String, String>,
    entries: Vec<ManifestEntry>,
    timings: Vec<(String, f64)>,
}

impl Store {
    pub fn open(root: &Path, config: &super::PipelineConfig) -> Result<Store> {
        std::fs::create_dir_all(root)?;
        let manifest_path = root.join(MANIFEST_FILE);
        let prev = if manifest_path.exists() {
            let text = std::fs::read_to_string(&manifest_path)?;
            let manifest: RunManifest = serde_json::from_str(&text)?;
            manifest
                .entries
                .into_iter()
                .map(|e| (e.path, e.hash))
                .collect()
        } else {
            BTreeMap::new()
        };
        Ok(Store {
            root: root.to_path_buf(),
            config: config.clone(),
            prev,
            entries: Vec::new(),
            timings: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn record(&mut self, stage: &str, rel: &str, hash: String, bytes: u64) {
        self.entries.push(ManifestEntry {
            stage: stage.to_string(),
            path: rel.to_string(),
            hash,
            bytes,
        });
    }

    /// True when every listed artifact exists and matches the previous
    /// manifest. A present-but-mismatched artifact is a stale error.
    fn reusable(&self, rels: &[&str]) -> Result<bool> {
        let mut all = true;
        for rel in rels {
            let path = self.path_of(rel);
            if !path.exists() {
                all = false;
                continue;
            }
            match self.prev.get(*rel) {
                Some(prev_hash) => {
                    let hash = sha256_file(&path)?;
                    if hash != *prev_hash {
                        return Err(Error::StaleArtifact(format!(
                            "{rel} on disk does not match the manifest (expected {prev_hash}, found {hash})"
                        )));
                    }
                }
                None => all = false,
            }
        }
        Ok(all)
    }

    /// Produce a group of artifacts: reuse them when every file matches the
    /// previous manifest, otherwise run `compute_write` to (re)create all of
    /// them, then load the result from disk.
    pub fn ensure_group<T>(
        &mut self,
        stage: &str,
        rels: &[&str],
        compute_write: impl FnOnce(&Store) -> Result<()>,
        load: impl FnOnce(&Store) -> Result<T>,
    ) -> Result<T> {
        let start = std::time::Instant::now();
        let reuse = self.reusable(rels).map_err(|e| e.in_stage(stage))?;
        if !reuse {
            compute_write(self).map_err(|e| e.in_stage(stage))?;
        }
        for rel in rels {
            let path = self.path_of(rel);
            let hash = sha256_file(&path).map_err(|e| e.in_stage(stage))?;
            let bytes = std::fs::metadata(&path)?.len();
            self.record(stage, rel, hash, bytes);
        }
        self.write_manifest()?;
        self.timings
            .push((format!("{stage}:{}", rels.join("+")), start.elapsed().as_secs_f64()));
        load(self).map_err(|e| e.in_stage(stage))
    }

    pub fn manifest(&self) -> RunManifest {
        let mut config = self.config.clone();
        config.out_dir = None;
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            entries: self.entries.clone(),
        }
    }

    /// Persist the (possibly partial) manifest.
    pub fn write_manifest(&self) -> Result<()> {
        let manifest = self.manifest();
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(self.root.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    /// Wall-clock stage timings; kept outside the manifest so reruns stay
    /// byte-identical.
    pub fn write_timings(&self) -> Result<()> {
        let mut out = String::from("stage,seconds\n");
        for (stage, secs) in &self.timings {
            out.push_str(&format!("{stage},{secs:.3}\n"));
        }
        std::fs::write(self.root.join(TIMINGS_FILE), out)?;
        Ok(())
    }
}
