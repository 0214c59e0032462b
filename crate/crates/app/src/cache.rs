//! Append-only response cache keyed by input content hash.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntryMetadata {
    pub model_hash: String,
    /// `(field, byte length)` of each input.
    pub fields: Vec<(String, u64)>,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub content_hash: String,
    pub summary: String,
    pub metadata: EntryMetadata,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

/// Reads a log, keeping the last entry per hash. Unparseable lines (such
/// as a torn final write) are skipped.
fn read_log(path: &Path) -> Result<(Vec<String>, HashMap<String, CacheEntry>, usize)> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(AppError::io(format!("reading {}", path.display()), e)),
    };
    let mut order = Vec::new();
    let mut index = HashMap::new();
    let mut lines = 0;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        lines += 1;
        match serde_json::from_str::<CacheEntry>(line) {
            Ok(e) => {
                if !index.contains_key(&e.content_hash) {
                    order.push(e.content_hash.clone());
                }
                index.insert(e.content_hash.clone(), e);
            }
            Err(e) => log::warn!("{} line {}: skipping unreadable cache entry: {e}", path.display(), i + 1),
        }
    }
    Ok((order, index, lines))
}

pub struct Cache {
    path: PathBuf,
    index: RwLock<HashMap<String, CacheEntry>>,
    log: Mutex<File>,
}

impl Cache {
    /// Opens or creates the log and rebuilds the in-memory index.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| AppError::io(format!("creating {}", dir.display()), e))?;
        }
        let (_, index, _) = read_log(path)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| AppError::io(format!("opening {}", path.display()), e))?;
        log::info!("cache {} holds {} entries", path.display(), index.len());
        Ok(Self { path: path.to_path_buf(), index: RwLock::new(index), log: Mutex::new(log) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, hash: &str) -> Option<CacheEntry> {
        self.index.read().expect("cache index lock").get(hash).cloned()
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache index lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends an entry and publishes it to readers once it is on disk.
    pub fn insert(&self, entry: CacheEntry) -> Result<()> {
        let mut line = serde_json::to_string(&entry).expect("cache entries serialize");
        line.push('\n');
        {
            let mut f = self.log.lock().expect("cache log lock");
            f.write_all(line.as_bytes()).and_then(|_| f.flush()).map_err(|e| AppError::io("appending to cache", e))?;
        }
        self.index.write().expect("cache index lock").insert(entry.content_hash.clone(), entry);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompactReport {
    pub lines_before: usize,
    pub entries_after: usize,
}

/// Rewrites the log with one line per hash, keeping first-seen order and
/// the latest entry. Must not run while a server has the log open.
pub fn compact(path: &Path) -> Result<CompactReport> {
    if !path.exists() {
        return Err(AppError::Config(format!("cache {} does not exist", path.display())));
    }
    let (order, index, lines_before) = read_log(path)?;
    let mut out = String::new();
    for h in &order {
        out.push_str(&serde_json::to_string(&index[h]).expect("cache entries serialize"));
        out.push('\n');
    }
    let tmp = path.with_extension("compact.tmp");
    std::fs::write(&tmp, out).map_err(|e| AppError::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| AppError::io(format!("replacing {}", path.display()), e))?;
    Ok(CompactReport { lines_before, entries_after: order.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(hash: &str, summary: &str) -> CacheEntry {
        CacheEntry { content_hash: hash.into(), summary: summary.into(), metadata: EntryMetadata::default(), created_at: 7 }
    }

    #[test]
    fn index_survives_restart_and_compaction() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let c = Cache::open(&path).unwrap();
            c.insert(entry("a", "one")).unwrap();
            c.insert(entry("b", "two")).unwrap();
            c.insert(entry("a", "three")).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"content_hash\":\"tor").unwrap();
        drop(f);

        let c = Cache::open(&path).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get("a").unwrap().summary, "three");
        drop(c);

        let r = compact(&path).unwrap();
        assert_eq!(r, CompactReport { lines_before: 4, entries_after: 2 });
        let c = Cache::open(&path).unwrap();
        assert_eq!(c.get("a").unwrap().summary, "three");
        assert_eq!(c.get("b").unwrap().summary, "two");
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
        assert!(compact(&dir.path().join("missing")).is_err());
    }
}
