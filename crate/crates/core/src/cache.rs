//! Persistent terminal-reward cache.
//!
//! Append-only record log with an in-memory index. Layout (little endian):
//!
//! ```text
//! header : b"GFNRCACH" | u32 schema version | u32 slots | u32 contexts
//! record : key bytes [slots] | raw f64 [C] | normalized f64 [C] | aggregate f64 | reward f64
//! ```
//!
//! A truncated trailing record (interrupted write) is ignored on load. When
//! the same key appears more than once the first record wins. Records are
//! appended in batches under an exclusive file lock, so several processes may
//! share one cache file.

use crate::reward::LossRecord;
use crate::space::StateKey;
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use thiserror::Error;

pub const CACHE_MAGIC: &[u8; 8] = b"GFNRCACH";
pub const CACHE_SCHEMA_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 3;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cache {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("record shape ({slots} slots, {contexts} contexts) does not match cache")]
    Shape { slots: usize, contexts: usize },
}

pub struct RewardCache {
    slots: usize,
    contexts: usize,
    index: RwLock<HashMap<StateKey, LossRecord>>,
    log: Option<Mutex<Log>>,
}

struct Log {
    path: PathBuf,
    file: File,
    pending: Vec<u8>,
}

/// Pending bytes that trigger an append.
const FLUSH_THRESHOLD: usize = 1 << 16;

impl Log {
    fn append(&mut self) -> Result<(), CacheError> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let io = |source| CacheError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.lock().map_err(io)?;
        let res = self.file.write_all(&self.pending).and_then(|_| self.file.flush());
        let _ = self.file.unlock();
        res.map_err(io)?;
        self.pending.clear();
        Ok(())
    }
}

impl RewardCache {
    pub fn in_memory(slots: usize, contexts: usize) -> Self {
        Self {
            slots,
            contexts,
            index: RwLock::new(HashMap::new()),
            log: None,
        }
    }

    /// Opens (or creates) a cache file and loads its records.
    pub fn open(path: &Path, slots: usize, contexts: usize) -> Result<Self, CacheError> {
        let io = |source| CacheError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        file.lock().map_err(io)?;
        let loaded = load_locked(&mut file, path, slots, contexts);
        let _ = file.unlock();
        let index = loaded?;
        Ok(Self {
            slots,
            contexts,
            index: RwLock::new(index),
            log: Some(Mutex::new(Log {
                path: path.to_path_buf(),
                file,
                pending: Vec::new(),
            })),
        })
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &StateKey) -> Option<LossRecord> {
        self.index.read().unwrap().get(key).cloned()
    }

    /// Commits `record` unless its key is already present; returns the
    /// committed record for the key.
    pub fn insert(&self, record: LossRecord) -> Result<LossRecord, CacheError> {
        if record.key.len() != self.slots
            || record.raw.len() != self.contexts
            || record.normalized.len() != self.contexts
        {
            return Err(CacheError::Shape {
                slots: record.key.len(),
                contexts: record.raw.len(),
            });
        }
        let mut index = self.index.write().unwrap();
        if let Some(existing) = index.get(&record.key) {
            return Ok(existing.clone());
        }
        if let Some(log) = &self.log {
            let mut log = log.lock().unwrap();
            log.pending.extend_from_slice(&encode_record(&record));
            if log.pending.len() >= FLUSH_THRESHOLD {
                log.append()?;
            }
        }
        index.insert(record.key.clone(), record.clone());
        Ok(record)
    }

    pub fn flush(&self) -> Result<(), CacheError> {
        if let Some(log) = &self.log {
            log.lock().unwrap().append()?;
        }
        Ok(())
    }
}

impl Drop for RewardCache {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Reads existing records and repairs the tail; the caller holds the file lock.
fn load_locked(
    file: &mut File,
    path: &Path,
    slots: usize,
    contexts: usize,
) -> Result<HashMap<StateKey, LossRecord>, CacheError> {
    let io = |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    };
    let format = |reason: String| CacheError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io)?;
    let mut index = HashMap::new();
    let mut valid_len = 0u64;
    if bytes.len() >= HEADER_LEN {
        let (s, c) = parse_header(&bytes).map_err(format)?;
        if (s, c) != (slots, contexts) {
            return Err(format(format!(
                "shape {s} slots x {c} contexts, expected {slots} x {contexts}"
            )));
        }
        let rec_len = record_len(slots, contexts);
        let body = &bytes[HEADER_LEN..];
        let complete = body.len() / rec_len;
        for chunk in body.chunks_exact(rec_len).take(complete) {
            let rec = decode_record(chunk, slots, contexts);
            index.entry(rec.key.clone()).or_insert(rec);
        }
        valid_len = (HEADER_LEN + complete * rec_len) as u64;
    } else if !bytes.is_empty() && !CACHE_MAGIC.starts_with(&bytes[..bytes.len().min(8)]) {
        return Err(format("not a reward cache".into()));
    }
    // drop any partial trailing record or partial header
    if valid_len != bytes.len() as u64 {
        file.set_len(valid_len).map_err(io)?;
    }
    if valid_len == 0 {
        file.write_all(&header(slots, contexts)).map_err(io)?;
    }
    Ok(index)
}

fn header(slots: usize, contexts: usize) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER_LEN);
    h.extend_from_slice(CACHE_MAGIC);
    h.extend_from_slice(&CACHE_SCHEMA_VERSION.to_le_bytes());
    h.extend_from_slice(&(slots as u32).to_le_bytes());
    h.extend_from_slice(&(contexts as u32).to_le_bytes());
    h
}

fn parse_header(bytes: &[u8]) -> Result<(usize, usize), String> {
    if &bytes[..8] != CACHE_MAGIC {
        return Err("not a reward cache".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    if word(0) != CACHE_SCHEMA_VERSION {
        return Err(format!("unsupported schema version {}", word(0)));
    }
    Ok((word(1) as usize, word(2) as usize))
}

pub fn record_len(slots: usize, contexts: usize) -> usize {
    slots + 8 * (2 * contexts + 2)
}

pub fn encode_record(r: &LossRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(record_len(r.key.len(), r.raw.len()));
    out.extend_from_slice(r.key.as_bytes());
    for v in r.raw.iter().chain(&r.normalized).chain([&r.aggregate, &r.reward]) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_record(bytes: &[u8], slots: usize, contexts: usize) -> LossRecord {
    let key = StateKey::new(bytes[..slots].to_vec());
    let floats: Vec<f64> = bytes[slots..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LossRecord {
        key,
        raw: floats[..contexts].to_vec(),
        normalized: floats[contexts..2 * contexts].to_vec(),
        aggregate: floats[2 * contexts],
        reward: floats[2 * contexts + 1],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(key: &[u8], seed: f64) -> LossRecord {
        LossRecord {
            key: StateKey::new(key.to_vec()),
            raw: vec![seed, seed * 2.0],
            normalized: vec![seed - 1.0, 0.1 / 3.0],
            aggregate: seed.sin(),
            reward: (-seed).exp(),
        }
    }

    #[test]
    fn persists_and_reloads_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rewards.bin");
        let a = rec(&[0, 1, 2], 0.123_456_789);
        let b = rec(&[2, 0, 1], 7.5e-9);
        {
            let cache = RewardCache::open(&path, 3, 2).unwrap();
            cache.insert(a.clone()).unwrap();
            cache.insert(b.clone()).unwrap();
        }
        let cache = RewardCache::open(&path, 3, 2).unwrap();
        assert_eq!(cache.len(), 2);
        let got = cache.get(&a.key).unwrap();
        assert_eq!(encode_record(&got), encode_record(&a));
        assert_eq!(cache.get(&b.key).unwrap(), b);
    }

    #[test]
    fn first_record_wins() {
        let cache = RewardCache::in_memory(3, 2);
        let first = rec(&[1, 1, 1], 1.0);
        cache.insert(first.clone()).unwrap();
        let committed = cache.insert(rec(&[1, 1, 1], 2.0)).unwrap();
        assert_eq!(committed, first);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn duplicate_in_log_resolves_to_first() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.bin");
        let mut bytes = header(3, 2);
        bytes.extend(encode_record(&rec(&[0, 0, 1], 1.0)));
        bytes.extend(encode_record(&rec(&[0, 0, 1], 2.0)));
        std::fs::write(&path, bytes).unwrap();
        let cache = RewardCache::open(&path, 3, 2).unwrap();
        assert_eq!(cache.get(&StateKey::new(vec![0, 0, 1])).unwrap(), rec(&[0, 0, 1], 1.0));
    }

    #[test]
    fn truncated_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.bin");
        let mut bytes = header(3, 2);
        bytes.extend(encode_record(&rec(&[0, 0, 1], 1.0)));
        let partial = encode_record(&rec(&[0, 1, 1], 2.0));
        bytes.extend(&partial[..10]);
        std::fs::write(&path, bytes).unwrap();
        {
            let cache = RewardCache::open(&path, 3, 2).unwrap();
            assert_eq!(cache.len(), 1);
            cache.insert(rec(&[2, 2, 2], 3.0)).unwrap();
        }
        let cache = RewardCache::open(&path, 3, 2).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.get(&StateKey::new(vec![2, 2, 2])).unwrap(), rec(&[2, 2, 2], 3.0));
    }

    #[test]
    fn rejects_foreign_files_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"definitely not a cache file").unwrap();
        assert!(matches!(
            RewardCache::open(&path, 3, 2),
            Err(CacheError::Format { .. })
        ));
        let path = dir.path().join("y.bin");
        drop(RewardCache::open(&path, 3, 2).unwrap());
        assert!(RewardCache::open(&path, 4, 2).is_err());
        let cache = RewardCache::in_memory(3, 2);
        assert!(cache.insert(rec(&[1, 1], 0.0)).is_err());
    }

    #[test]
    fn concurrent_inserts_commit_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conc.bin");
        {
            let cache = RewardCache::open(&path, 3, 2).unwrap();
            std::thread::scope(|s| {
                for t in 0..8 {
                    let cache = &cache;
                    s.spawn(move || {
                        for i in 0..50u8 {
                            cache.insert(rec(&[i % 10, 0, 0], t as f64)).unwrap();
                        }
                    });
                }
            });
            assert_eq!(cache.len(), 10);
        }
        let len = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, HEADER_LEN + 10 * record_len(3, 2));
    }

    proptest! {
        #[test]
        fn record_encoding_round_trips(key in prop::collection::vec(any::<u8>(), 5), vals in prop::collection::vec(any::<f64>(), 14)) {
            let r = LossRecord {
                key: StateKey::new(key),
                raw: vals[..6].to_vec(),
                normalized: vals[6..12].to_vec(),
                aggregate: vals[12],
                reward: vals[13],
            };
            let back = decode_record(&encode_record(&r), 5, 6);
            prop_assert_eq!(encode_record(&back), encode_record(&r));
        }
    }
}
