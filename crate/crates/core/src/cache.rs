//! Persistent tuning cache. One JSON document per key under a cache
//! directory; the key couples operator signature, template identity, and
//! the host hardware, so results never leak across machines or templates.
//! Entries hold the best config per search strategy plus the evaluator
//! fingerprint that produced them; a fingerprint mismatch is treated as a
//! miss and the stale entry is overwritten on the next store.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;

/// Host descriptor the cache keys on: CPU model name plus logical core
/// count, e.g. "AMD EPYC 7B13 x4". Unknown hosts fall back to the
/// architecture so the cache still partitions coarsely.
pub fn hardware_tag() -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let model = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{model} x{cores}")
}

/// Stable hex key for one (operator, template, host) combination.
pub fn cache_key(op_signature: &str, template_id: &str, hardware: &str) -> String {
    let mut h = Sha256::new();
    h.update(op_signature.as_bytes());
    h.update([0u8]);
    h.update(template_id.as_bytes());
    h.update([0u8]);
    h.update(hardware.as_bytes());
    let digest = h.finalize();
    hex::encode(&digest[..16])
}

/// Best result one strategy found for the keyed operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResult {
    pub config: ScheduleConfig,
    pub runtime_ms: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub op_signature: String,
    pub template_id: String,
    pub hardware: String,
    pub fingerprint: String,
    /// Strategy name ("genetic", "rl", "random") to its best result.
    pub best: BTreeMap<String, CachedResult>,
}

impl CacheEntry {
    pub fn key(&self) -> String {
        cache_key(&self.op_signature, &self.template_id, &self.hardware)
    }
}

/// Directory-backed store; every operation goes straight to disk so
/// separate processes share state through the filesystem.
#[derive(Debug, Clone)]
pub struct CacheStore {
    dir: PathBuf,
}

impl CacheStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Returns the entry for `key` if present and parseable. A fingerprint
    /// check is the caller's job: stale entries are still returned so the
    /// caller can decide to merge or discard.
    pub fn lookup(&self, key: &str) -> Result<Option<CacheEntry>> {
        let path = self.path_for(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path.display().to_string(), e)),
        };
        let entry: CacheEntry = serde_json::from_str(&text)
            .map_err(|e| Error::malformed("cache entry", format!("{}: {e}", path.display())))?;
        Ok(Some(entry))
    }

    /// Atomically persists `entry` under its key (write temp, then rename,
    /// so concurrent readers never observe a torn file).
    pub fn store(&self, entry: &CacheEntry) -> Result<()> {
        let path = self.path_for(&entry.key());
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(entry)
            .map_err(|e| Error::malformed("cache entry", e.to_string()))?;
        fs::write(&tmp, text).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    /// Every readable entry in the directory, key-sorted.
    pub fn entries(&self) -> Result<Vec<CacheEntry>> {
        let mut out = Vec::new();
        let iter =
            fs::read_dir(&self.dir).map_err(|e| Error::io(self.dir.display().to_string(), e))?;
        for item in iter {
            let item = item.map_err(|e| Error::io(self.dir.display().to_string(), e))?;
            let path = item.path();
            if path.extension().is_some_and(|e| e == "json") {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                if let Some(entry) = self.lookup(stem)? {
                    out.push(entry);
                }
            }
        }
        out.sort_by_key(|e| e.key());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(sig: &str) -> CacheEntry {
        let mut best = BTreeMap::new();
        best.insert(
            "genetic".to_string(),
            CachedResult {
                config: ScheduleConfig::new(vec![4, 2, 1]),
                runtime_ms: 1.25,
                evaluations: 96,
            },
        );
        CacheEntry {
            op_signature: sig.to_string(),
            template_id: "0011223344556677".to_string(),
            hardware: "test-cpu x1".to_string(),
            fingerprint: "synthetic:abcd:noise=0".to_string(),
            best,
        }
    }

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        let e = entry("conv2d[n1]");
        store.store(&e).unwrap();

        // A fresh store over the same directory simulates a new process.
        let reopened = CacheStore::open(dir.path()).unwrap();
        let found = reopened.lookup(&e.key()).unwrap().expect("entry");
        assert_eq!(found, e);
        assert_eq!(reopened.lookup("ffffffffffffffffffffffffffffffff").unwrap(), None);
    }

    #[test]
    fn store_overwrites_in_place() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        let mut e = entry("conv2d[n1]");
        store.store(&e).unwrap();
        e.best.get_mut("genetic").unwrap().runtime_ms = 0.5;
        e.fingerprint = "synthetic:ef01:noise=0".to_string();
        store.store(&e).unwrap();
        let found = store.lookup(&e.key()).unwrap().expect("entry");
        assert_eq!(found.best["genetic"].runtime_ms, 0.5);
        assert_eq!(store.entries().unwrap().len(), 1);
    }

    #[test]
    fn keys_separate_op_template_and_host() {
        let base = cache_key("conv", "t1", "cpu x1");
        assert_eq!(base, cache_key("conv", "t1", "cpu x1"));
        assert_ne!(base, cache_key("conv2", "t1", "cpu x1"));
        assert_ne!(base, cache_key("conv", "t2", "cpu x1"));
        assert_ne!(base, cache_key("conv", "t1", "cpu x2"));
        assert_eq!(base.len(), 32);
    }

    #[test]
    fn malformed_entries_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path()).unwrap();
        std::fs::write(dir.path().join("deadbeef.json"), "{not json").unwrap();
        assert!(matches!(store.lookup("deadbeef"), Err(Error::Malformed { .. })));
    }

    #[test]
    fn hardware_tag_is_stable_and_nonempty() {
        let a = hardware_tag();
        assert_eq!(a, hardware_tag());
        assert!(a.contains('x'));
    }
}
