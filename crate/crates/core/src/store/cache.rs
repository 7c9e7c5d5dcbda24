use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::dsp::{ChannelRole, FeatureConfig, FeatureTensor};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"SELDFEAT";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    key: String,
    fingerprint: String,
    config: FeatureConfig,
    roles: Vec<ChannelRole>,
}

/// Compute-on-miss store of feature tensors under `dir`, keyed by
/// `(key, FeatureConfig::fingerprint)`. Safe for concurrent readers; each entry
/// is written by atomic rename.
#[derive(Debug)]
pub struct FeatureCache {
    dir: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    /// Blob path; the JSON sidecar sits next to it.
    pub fn entry_path(&self, key: &str, cfg: &FeatureConfig) -> PathBuf {
        self.dir.join(format!("{key}.{}.feat", cfg.fingerprint()))
    }

    fn sidecar_path(blob: &Path) -> PathBuf {
        blob.with_extension("json")
    }

    /// `Ok(None)` when absent, `Err(Corrupt)` when present but unreadable.
    pub fn load(&self, key: &str, cfg: &FeatureConfig) -> Result<Option<FeatureTensor>> {
        let blob = self.entry_path(key, cfg);
        if !blob.exists() {
            return Ok(None);
        }
        let corrupt = |reason: String| Error::Corrupt {
            path: blob.clone(),
            reason,
        };
        let side_bytes = super::read_bytes(&Self::sidecar_path(&blob))?;
        let side: Sidecar =
            serde_json::from_slice(&side_bytes).map_err(|e| corrupt(format!("sidecar: {e}")))?;
        if side.key != key || side.fingerprint != cfg.fingerprint() || side.config != *cfg {
            return Err(corrupt("sidecar describes another entry".into()));
        }
        let bytes = super::read_bytes(&blob)?;
        if bytes.len() < HEADER_LEN || &bytes[..8] != CACHE_MAGIC {
            return Err(corrupt("bad header".into()));
        }
        let word = |k: usize| {
            u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().expect("4 bytes"))
        };
        if word(0) != CACHE_VERSION {
            return Err(Error::Version {
                path: blob.clone(),
                found: word(0),
                expected: CACHE_VERSION,
            });
        }
        let (c, t, f) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let body = &bytes[HEADER_LEN..];
        if body.len() != c * t * f * 4 {
            return Err(corrupt(format!(
                "{} data bytes for dims {c}x{t}x{f}",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        FeatureTensor::new(data, c, t, f, side.roles)
            .map(Some)
            .map_err(|e| corrupt(e.to_string()))
    }

    pub fn store(&self, key: &str, cfg: &FeatureConfig, x: &FeatureTensor) -> Result<()> {
        let blob = self.entry_path(key, cfg);
        let (c, t, f) = x.dims();
        let mut bytes = Vec::with_capacity(HEADER_LEN + x.data().len() * 4);
        bytes.extend_from_slice(CACHE_MAGIC);
        for w in [CACHE_VERSION, c as u32, t as u32, f as u32] {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        for v in x.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let side = Sidecar {
            key: key.to_string(),
            fingerprint: cfg.fingerprint(),
            config: cfg.clone(),
            roles: x.roles().to_vec(),
        };
        // sidecar first: a blob without a matching sidecar reads as corrupt, never as stale
        super::atomic_write(
            &Self::sidecar_path(&blob),
            &serde_json::to_vec_pretty(&side)?,
        )?;
        super::atomic_write(&blob, &bytes)
    }

    /// Cached tensor, or `compute()` stored on a miss. Corrupt entries are recomputed and overwritten.
    pub fn get_or_compute<F>(
        &self,
        key: &str,
        cfg: &FeatureConfig,
        compute: F,
    ) -> Result<FeatureTensor>
    where
        F: FnOnce() -> Result<FeatureTensor>,
    {
        match self.load(key, cfg) {
            Ok(Some(x)) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(x);
            }
            Ok(None) => {}
            Err(e @ (Error::Corrupt { .. } | Error::Version { .. } | Error::NotFound(_))) => {
                log::warn!("recomputing cache entry {key}: {e}");
            }
            Err(e) => return Err(e),
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let x = compute()?;
        self.store(key, cfg, &x)?;
        Ok(x)
    }
}
