//! Persistent append-only score cache.
//!
//! File layout, repeated until EOF:
//!
//! ```text
//! u64 LE   body length L
//! L bytes  body:
//!            u8      record version (= 1)
//!            u8      flags (bit 0: first token dropped)
//!            u8      digest length D (= 32)
//!            D bytes SHA-256 key digest
//!            f64 LE  natural-log probability
//!            i64 LE  created_at, seconds since the Unix epoch
//! ```
//!
//! A record cut short by a crash can only be the last one in the file; it is
//! dropped (and the file truncated to the last complete record) on open. A
//! complete record that fails to decode is an error naming its byte offset.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{BackendDescriptor, BackendError, LanguageModel, MaskFill, SequenceLogProb};

/// Bumped whenever the meaning of a cached value changes.
pub const PROTOCOL_VERSION: u32 = 1;

const RECORD_VERSION: u8 = 1;
const DIGEST_LEN: usize = 32;
const BODY_LEN: usize = 3 + DIGEST_LEN + 8 + 8;
const FLAG_FIRST_TOKEN_DROPPED: u8 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cache {path}: corrupt record at byte offset {offset}: {reason}")]
    Corrupt { path: PathBuf, offset: u64, reason: String },
}

pub type Key = [u8; DIGEST_LEN];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheEntry {
    pub key: Key,
    pub log_prob: f64,
    pub first_token_dropped: bool,
    pub created_at: i64,
}

/// Digest of (model id, protocol version, repetition index, scored string).
/// Fields are length-prefixed so distinct tuples never share a preimage.
pub fn cache_key(model_id: &str, repetition: u32, text: &str) -> Key {
    let mut h = Sha256::new();
    h.update((model_id.len() as u64).to_le_bytes());
    h.update(model_id.as_bytes());
    h.update(PROTOCOL_VERSION.to_le_bytes());
    h.update(repetition.to_le_bytes());
    h.update((text.len() as u64).to_le_bytes());
    h.update(text.as_bytes());
    h.finalize().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct CacheStats {
    pub entries: usize,
    pub file_bytes: u64,
    pub dropped_tail_bytes: u64,
}

#[derive(Debug)]
pub struct ScoreCache {
    path: PathBuf,
    entries: RwLock<HashMap<Key, CacheEntry>>,
    writer: Mutex<File>,
    dropped_tail_bytes: u64,
}

impl ScoreCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| CacheError::Io { path: path.clone(), source };
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path).map_err(io)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io)?;

        let (entries, valid_len) = decode_records(&path, &bytes)?;
        let dropped = bytes.len() as u64 - valid_len;
        if dropped > 0 {
            log::warn!("cache {}: dropping {dropped} byte(s) of torn trailing record", path.display());
            file.set_len(valid_len).map_err(io)?;
            file.seek(SeekFrom::End(0)).map_err(io)?;
        }
        let map = entries.into_iter().map(|e| (e.key, e)).collect();
        Ok(Self { path, entries: RwLock::new(map), writer: Mutex::new(file), dropped_tail_bytes: dropped })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &Key) -> Option<CacheEntry> {
        self.entries.read().expect("cache lock poisoned").get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends an entry unless the key is already present. Returns whether a
    /// record was written.
    pub fn insert(&self, key: Key, value: SequenceLogProb) -> Result<bool, CacheError> {
        let mut writer = self.writer.lock().expect("cache writer poisoned");
        if self.get(&key).is_some() {
            return Ok(false);
        }
        let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs() as i64).unwrap_or(0);
        let entry = CacheEntry { key, log_prob: value.log_prob, first_token_dropped: value.first_token_dropped, created_at };
        writer
            .write_all(&encode_record(&entry))
            .and_then(|_| writer.flush())
            .map_err(|source| CacheError::Io { path: self.path.clone(), source })?;
        self.entries.write().expect("cache lock poisoned").insert(key, entry);
        Ok(true)
    }

    pub fn stats(&self) -> CacheStats {
        let file_bytes = std::fs::metadata(&self.path).map(|m| m.len()).unwrap_or(0);
        CacheStats { entries: self.len(), file_bytes, dropped_tail_bytes: self.dropped_tail_bytes }
    }

    /// Deletes the cache file at `path`, if any.
    pub fn purge(path: impl AsRef<Path>) -> Result<bool, CacheError> {
        let path = path.as_ref();
        match std::fs::remove_file(path) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
            Err(source) => Err(CacheError::Io { path: path.to_path_buf(), source }),
        }
    }
}

fn encode_record(e: &CacheEntry) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + BODY_LEN);
    out.extend_from_slice(&(BODY_LEN as u64).to_le_bytes());
    out.push(RECORD_VERSION);
    out.push(if e.first_token_dropped { FLAG_FIRST_TOKEN_DROPPED } else { 0 });
    out.push(DIGEST_LEN as u8);
    out.extend_from_slice(&e.key);
    out.extend_from_slice(&e.log_prob.to_le_bytes());
    out.extend_from_slice(&e.created_at.to_le_bytes());
    out
}

/// Returns complete records and the byte length they occupy.
fn decode_records(path: &Path, bytes: &[u8]) -> Result<(Vec<CacheEntry>, u64), CacheError> {
    let mut entries = Vec::new();
    let mut pos = 0usize;
    let corrupt = |offset: usize, reason: String| CacheError::Corrupt { path: path.to_path_buf(), offset: offset as u64, reason };
    while pos < bytes.len() {
        let Some(len_bytes) = bytes.get(pos..pos + 8) else { break };
        let len = u64::from_le_bytes(len_bytes.try_into().unwrap());
        let body_start = pos + 8;
        let remaining = (bytes.len() - body_start) as u64;
        if len > remaining {
            // torn final record
            break;
        }
        let body = &bytes[body_start..body_start + len as usize];
        if len as usize != BODY_LEN {
            return Err(corrupt(pos, format!("record length {len}, expected {BODY_LEN}")));
        }
        if body[0] != RECORD_VERSION {
            return Err(corrupt(pos, format!("unknown record version {}", body[0])));
        }
        if body[1] & !FLAG_FIRST_TOKEN_DROPPED != 0 {
            return Err(corrupt(pos, format!("unknown flags {:#04x}", body[1])));
        }
        if body[2] as usize != DIGEST_LEN {
            return Err(corrupt(pos, format!("digest length {}, expected {DIGEST_LEN}", body[2])));
        }
        let key: Key = body[3..3 + DIGEST_LEN].try_into().unwrap();
        let lp_off = 3 + DIGEST_LEN;
        let log_prob = f64::from_le_bytes(body[lp_off..lp_off + 8].try_into().unwrap());
        let created_at = i64::from_le_bytes(body[lp_off + 8..lp_off + 16].try_into().unwrap());
        if log_prob.is_nan() || log_prob > 0.0 {
            return Err(corrupt(pos, format!("log-probability {log_prob} out of range")));
        }
        entries.push(CacheEntry { key, log_prob, first_token_dropped: body[1] & FLAG_FIRST_TOKEN_DROPPED != 0, created_at });
        pos = body_start + len as usize;
    }
    Ok((entries, pos as u64))
}

/// Read-through/write-through cache in front of another backend's
/// `sequence_logprob`. Fill-mask and embedding calls pass through.
#[derive(Debug)]
pub struct CachedBackend<B> {
    inner: B,
    cache: ScoreCache,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<B: LanguageModel> CachedBackend<B> {
    pub fn new(inner: B, cache: ScoreCache) -> Self {
        Self { inner, cache, hits: AtomicU64::new(0), misses: AtomicU64::new(0) }
    }

    pub fn open(inner: B, cache_path: impl AsRef<Path>) -> Result<Self, CacheError> {
        Ok(Self::new(inner, ScoreCache::open(cache_path)?))
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cache(&self) -> &ScoreCache {
        &self.cache
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

impl<B: LanguageModel> LanguageModel for CachedBackend<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn sequence_logprob(&self, text: &str) -> Result<SequenceLogProb, BackendError> {
        self.sequence_logprob_sample(text, 0)
    }

    fn sequence_logprob_sample(&self, text: &str, repetition: u32) -> Result<SequenceLogProb, BackendError> {
        let key = cache_key(&self.inner.descriptor().model_id, repetition, text);
        if let Some(e) = self.cache.get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(SequenceLogProb { log_prob: e.log_prob, first_token_dropped: e.first_token_dropped });
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let value = self.inner.sequence_logprob_sample(text, repetition)?;
        self.cache.insert(key, value)?;
        // a concurrent writer may have won; serve the persisted value
        let e = self.cache.get(&key).expect("entry present after insert");
        Ok(SequenceLogProb { log_prob: e.log_prob, first_token_dropped: e.first_token_dropped })
    }

    fn fill_mask(&self, template: &str, top_k: usize) -> Result<Vec<MaskFill>, BackendError> {
        self.inner.fill_mask(template, top_k)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.inner.embed(text)
    }
}
