//! Content-addressed, append-only reply cache: one JSON file per request
//! hash.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Backend, RawReply};

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache i/o failure at {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache entry {path}: {reason}")]
    Corrupt { path: String, reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    request_hash: String,
    request: Value,
    reply_text: String,
    /// Seconds since the Unix epoch.
    timestamp: u64,
    backend: Backend,
    latency_ms: u64,
    attempt_count: u32,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CacheError + '_ {
    move |source| CacheError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, request_hash: &str) -> PathBuf {
        self.dir.join(format!("{request_hash}.json"))
    }

    pub fn contains(&self, request_hash: &str) -> bool {
        self.path_for(request_hash).exists()
    }

    /// Stores `reply` under its request hash. Returns `false` without
    /// touching the file when the hash is already present.
    pub fn put(&self, reply: &RawReply, request: &Value) -> Result<bool, CacheError> {
        let path = self.path_for(&reply.request_hash);
        if path.exists() {
            return Ok(false);
        }
        let entry = Entry {
            request_hash: reply.request_hash.clone(),
            request: request.clone(),
            reply_text: reply.text.clone(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            backend: reply.backend_used,
            latency_ms: reply.latency_ms,
            attempt_count: reply.attempt_count,
        };
        let tmp = self.dir.join(format!(
            ".{}.{}.{}.tmp",
            reply.request_hash,
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
            serde_json::to_writer(&mut f, &entry).map_err(|e| CacheError::IoFailure {
                path: tmp.display().to_string(),
                source: e.into(),
            })?;
            f.flush().map_err(io_err(&tmp))?;
        }
        if path.exists() {
            let _ = std::fs::remove_file(&tmp);
            return Ok(false);
        }
        std::fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(true)
    }

    pub fn get(&self, request_hash: &str) -> Result<Option<RawReply>, CacheError> {
        let path = self.path_for(request_hash);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let entry: Entry = serde_json::from_slice(&bytes).map_err(|e| CacheError::Corrupt {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(Some(RawReply {
            text: entry.reply_text,
            request_hash: entry.request_hash,
            backend_used: entry.backend,
            latency_ms: entry.latency_ms,
            attempt_count: entry.attempt_count,
        }))
    }
}
