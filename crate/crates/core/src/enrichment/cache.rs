//! Content-addressed store for provider outputs.
//!
//! One JSON file per entry under `<dir>/<first two hex>/<digest>.json`,
//! written atomically and never overwritten. An in-memory layer fronts the
//! directory; a cache without a directory is purely in-memory.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::hashing::{hash_parts, sha256_hex};
use crate::provider::{Capability, ProviderIdentity};

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache entry {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

/// Everything an output depends on. Holds ids and hashes only, never secrets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub capability: Capability,
    pub provider_id: String,
    pub model_id: String,
    pub prompt_hash: String,
    pub input_hash: String,
}

impl CacheKey {
    pub fn new(capability: Capability, identity: &ProviderIdentity, prompt_hash: &str, input: &str) -> Self {
        CacheKey {
            capability,
            provider_id: identity.provider_id.clone(),
            model_id: identity.model_id.clone(),
            prompt_hash: prompt_hash.to_string(),
            input_hash: sha256_hex(input.as_bytes()),
        }
    }

    pub fn digest(&self) -> String {
        hash_parts([
            self.capability.route(),
            &self.provider_id,
            &self.model_id,
            &self.prompt_hash,
            &self.input_hash,
        ])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub created_unix: u64,
    pub output: Value,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    pub writes: usize,
}

#[derive(Debug, Default)]
pub struct EnrichmentCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, Value>>,
    writer: Mutex<()>,
    hits: AtomicUsize,
    misses: AtomicUsize,
    writes: AtomicUsize,
}

impl EnrichmentCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self, CacheError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|source| CacheError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(EnrichmentCache {
            dir: Some(dir),
            ..Self::default()
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn entry_path(&self, digest: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(&digest[..2]).join(format!("{digest}.json")))
    }

    fn lookup(&self, digest: &str) -> Result<Option<Value>, CacheError> {
        if let Some(v) = self.memory.read().expect("cache poisoned").get(digest) {
            return Ok(Some(v.clone()));
        }
        let Some(path) = self.entry_path(digest) else {
            return Ok(None);
        };
        let raw = match fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(CacheError::Io { path, source }),
        };
        let entry: CacheEntry = serde_json::from_str(&raw).map_err(|e| CacheError::Corrupt {
            path: path.clone(),
            message: e.to_string(),
        })?;
        self.memory
            .write()
            .expect("cache poisoned")
            .insert(digest.to_string(), entry.output.clone());
        Ok(Some(entry.output))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &CacheKey) -> Result<Option<T>, CacheError> {
        let digest = key.digest();
        match self.lookup(&digest)? {
            Some(v) => {
                let out = serde_json::from_value(v).map_err(|e| CacheError::Corrupt {
                    path: self.entry_path(&digest).unwrap_or_default(),
                    message: e.to_string(),
                })?;
                self.hits.fetch_add(1, Ordering::Relaxed);
                Ok(Some(out))
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                Ok(None)
            }
        }
    }

    /// Store `value` unless an entry already exists; existing entries win.
    pub fn put<T: Serialize>(&self, key: &CacheKey, value: &T) -> Result<(), CacheError> {
        let digest = key.digest();
        let output = serde_json::to_value(value).map_err(|e| CacheError::Corrupt {
            path: PathBuf::new(),
            message: e.to_string(),
        })?;
        let _guard = self.writer.lock().expect("cache poisoned");
        if self.lookup(&digest)?.is_some() {
            return Ok(());
        }
        if let Some(path) = self.entry_path(&digest) {
            let parent = path.parent().expect("entry has parent").to_path_buf();
            let io = |source| CacheError::Io {
                path: parent.clone(),
                source,
            };
            fs::create_dir_all(&parent).map_err(io)?;
            let entry = CacheEntry {
                key: key.clone(),
                created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
                output: output.clone(),
            };
            let mut tmp = tempfile::NamedTempFile::new_in(&parent).map_err(io)?;
            serde_json::to_writer(&mut tmp, &entry).map_err(|e| CacheError::Corrupt {
                path: path.clone(),
                message: e.to_string(),
            })?;
            tmp.flush().map_err(io)?;
            if let Err(e) = tmp.persist_noclobber(&path) {
                if e.error.kind() != std::io::ErrorKind::AlreadyExists {
                    return Err(CacheError::Io { path, source: e.error });
                }
            }
        }
        self.memory.write().expect("cache poisoned").insert(digest, output);
        self.writes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            writes: self.writes.load(Ordering::Relaxed),
        }
    }
}
