//! Append-only run manifest: one entry per executed stage with the hashes of
//! everything it read and wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: String,
    pub params_hash: String,
    /// Path (relative to the run directory when internal) to content hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub llm_calls: u64,
    #[serde(default)]
    pub cache_hits: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub entries: Vec<StageEntry>,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        RunManifest { run_id: format!("run-{}-{}", now_unix(), &config_hash[..8.min(config_hash.len())]), config_hash: config_hash.into(), entries: Vec::new() }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    /// Loads the manifest of `run_dir`, or starts a fresh one.
    pub fn open(run_dir: &Path, config_hash: &str) -> Result<Self> {
        let p = Self::path(run_dir);
        if p.exists() {
            let mut m: RunManifest = util::read_json(&p)?;
            if m.config_hash != config_hash {
                log::info!("config changed since run {}; stages re-check their own parameters", m.run_id);
                m.config_hash = config_hash.into();
            }
            Ok(m)
        } else {
            Ok(Self::new(config_hash))
        }
    }

    pub fn latest(&self, stage: &str) -> Option<&StageEntry> {
        self.entries.iter().rev().find(|e| e.stage == stage)
    }

    /// Appends and persists. Earlier entries are never rewritten.
    pub fn append(&mut self, run_dir: &Path, entry: StageEntry) -> Result<()> {
        let p = Self::path(run_dir);
        if p.exists() {
            let on_disk: RunManifest = util::read_json(&p)?;
            let same = |a: &StageEntry, b: &StageEntry| {
                a.stage == b.stage && a.params_hash == b.params_hash && a.outputs == b.outputs && a.finished_unix == b.finished_unix
            };
            if on_disk.entries.len() > self.entries.len() || !on_disk.entries.iter().zip(&self.entries).all(|(a, b)| same(a, b)) {
                return Err(Error::Internal(format!("{} was modified by another writer", p.display())));
            }
        }
        self.entries.push(entry);
        util::write_json(&p, self)
    }

    /// Latest recorded hash of an output path, with the stage that wrote it.
    pub fn recorded_output(&self, path: &str) -> Option<(&str, &str)> {
        self.entries
            .iter()
            .rev()
            .find_map(|e| e.outputs.get(path).map(|h| (e.stage.as_str(), h.as_str())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(stage: &str, out: &str, hash: &str) -> StageEntry {
        StageEntry {
            stage: stage.into(),
            params_hash: "p".into(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::from([(out.to_string(), hash.to_string())]),
            seeds: BTreeMap::new(),
            llm_calls: 0,
            cache_hits: 0,
            started_unix: 0,
            finished_unix: 0,
            notes: BTreeMap::new(),
        }
    }

    #[test]
    fn append_persists_and_latest_wins() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::open(dir.path(), "abc").unwrap();
        m.append(dir.path(), entry("split", "split.json", "h1")).unwrap();
        m.append(dir.path(), entry("split", "split.json", "h2")).unwrap();
        let again = RunManifest::open(dir.path(), "abc").unwrap();
        assert_eq!(again.entries.len(), 2);
        assert_eq!(again.latest("split").unwrap().outputs["split.json"], "h2");
        assert_eq!(again.recorded_output("split.json"), Some(("split", "h2")));
        assert_eq!(again.recorded_output("nope"), None);
    }

    #[test]
    fn concurrent_rewrite_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = RunManifest::open(dir.path(), "abc").unwrap();
        let mut b = RunManifest::open(dir.path(), "abc").unwrap();
        a.append(dir.path(), entry("ingest", "corpus.jsonl", "x")).unwrap();
        assert!(matches!(b.append(dir.path(), entry("split", "split.json", "y")), Err(Error::Internal(_))));
    }
}
