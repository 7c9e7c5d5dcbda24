use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::spatial::{MicArrayGeometry, SceneGenerator};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// One clip. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub foa: PathBuf,
    pub mic: PathBuf,
    pub labels: PathBuf,
    /// Seconds.
    pub duration: f64,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub sample_rate: u32,
    /// Class names; the class id is the index.
    pub classes: Vec<String>,
    pub geometry: MicArrayGeometry,
    /// Generator settings, when the dataset is synthetic.
    pub generator: Option<SceneGenerator>,
    pub master_seed: u64,
    pub clips: Vec<ClipEntry>,
}

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn clips_in(&self, split: Split) -> impl Iterator<Item = &ClipEntry> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn clip(&self, id: &str) -> Option<&ClipEntry> {
        self.clips.iter().find(|c| c.id == id)
    }

    /// Checks everything but file existence.
    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.classes.is_empty(),
            InvalidArgument,
            "manifest lists no classes"
        );
        ensure!(
            self.sample_rate > 0,
            InvalidArgument,
            "sample rate must be positive"
        );
        let mut ids: Vec<&str> = self.clips.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!(
                "duplicate clip id {}",
                w[0]
            )));
        }
        for c in &self.clips {
            ensure!(
                !c.id.is_empty() && !c.id.contains(['/', '\\']),
                InvalidArgument,
                "clip id {:?} is not a plain name",
                c.id
            );
            ensure!(
                c.duration > 0.0,
                InvalidArgument,
                "clip {} has duration {}",
                c.id,
                c.duration
            );
        }
        Ok(())
    }

    /// Writes `manifest.json` content to `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        super::atomic_write(path, &bytes)
    }

    /// Reads and validates a manifest, including that every referenced file exists.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = super::read_bytes(path)?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes)?;
        let found = raw
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Corrupt {
                path: path.into(),
                reason: "no numeric version field".into(),
            })?;
        if found != MANIFEST_VERSION as u64 {
            return Err(Error::Version {
                path: path.into(),
                found: found.min(u32::MAX as u64) as u32,
                expected: MANIFEST_VERSION,
            });
        }
        let m: Self = serde_json::from_value(raw)?;
        m.validate()?;
        let root = path.parent().unwrap_or(Path::new(""));
        for c in &m.clips {
            for rel in [&c.foa, &c.mic, &c.labels] {
                let p = root.join(rel);
                if !p.is_file() {
                    return Err(Error::NotFound(p));
                }
            }
        }
        Ok(m)
    }

    /// Absolute location of a manifest-relative path.
    pub fn resolve(manifest_path: &Path, rel: &Path) -> PathBuf {
        manifest_path.parent().unwrap_or(Path::new("")).join(rel)
    }
}
