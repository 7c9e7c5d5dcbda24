use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{ensure, Error, Result};
use crate::model::{BranchKind, SeldConfig, SeldNet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SELDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// JSON half of a checkpoint; values live in the `.bin` next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub kind: BranchKind,
    pub fingerprint: String,
    pub config: SeldConfig,
    pub params: Vec<ParamEntry>,
    pub n_values: usize,
    pub data_sha256: String,
    /// Free-form provenance such as regime, stage, epoch and seeds.
    pub metadata: BTreeMap<String, String>,
}

impl CheckpointMeta {
    /// Errors unless the checkpoint was built for `cfg`'s architecture.
    pub fn ensure_compatible(&self, cfg: &SeldConfig) -> Result<()> {
        ensure!(
            self.fingerprint == cfg.fingerprint(),
            Incompatible,
            "checkpoint fingerprint {} does not match configuration {}",
            self.fingerprint,
            cfg.fingerprint()
        );
        Ok(())
    }
}

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("bin"))
}

/// Writes `<path>.json` and `<path>.bin` (any extension on `path` is replaced).
pub fn save_checkpoint(
    net: &SeldNet<f32>,
    path: &Path,
    metadata: &BTreeMap<String, String>,
) -> Result<CheckpointMeta> {
    let (json_path, bin_path) = paths(path);
    let n_values: usize = net.params().iter().map(|p| p.value.len()).sum();
    let mut bin = Vec::with_capacity(HEADER_LEN + 4 * n_values);
    bin.extend_from_slice(CHECKPOINT_MAGIC);
    bin.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bin.extend_from_slice(&(n_values as u64).to_le_bytes());
    for p in net.params().iter() {
        for v in p.value.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        kind: net.kind(),
        fingerprint: net.config().fingerprint(),
        config: net.config().clone(),
        params: net
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
        n_values,
        data_sha256: super::sha256_hex(&bin),
        metadata: metadata.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.push(b'\n');
    super::atomic_write(&bin_path, &bin)?;
    super::atomic_write(&json_path, &json)?;
    Ok(meta)
}

/// Reads only the JSON half.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let (json_path, _) = paths(path);
    let bytes = super::read_bytes(&json_path)?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if found != CHECKPOINT_VERSION as u64 {
        return Err(Error::Version {
            path: json_path,
            found: found.min(u32::MAX as u64) as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta: CheckpointMeta = serde_json::from_value(raw).map_err(|e| Error::Corrupt {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    meta.ensure_compatible(&meta.config)?;
    Ok(meta)
}

/// Loads a network. With `expect_kind`, a checkpoint of another branch kind is rejected.
pub fn load_checkpoint(
    path: &Path,
    expect_kind: Option<BranchKind>,
) -> Result<(SeldNet<f32>, CheckpointMeta)> {
    let meta = read_checkpoint_meta(path)?;
    if let Some(k) = expect_kind {
        ensure!(
            meta.kind == k,
            Incompatible,
            "{} holds a {} branch, expected {}",
            path.display(),
            meta.kind.as_str(),
            k.as_str()
        );
    }
    let (_, bin_path) = paths(path);
    let bin = super::read_bytes(&bin_path)?;
    let corrupt = |reason: String| Error::Corrupt {
        path: bin_path.clone(),
        reason,
    };
    if bin.len() < HEADER_LEN || &bin[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad header".into()));
    }
    let version = u32::from_le_bytes(bin[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: bin_path,
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = u64::from_le_bytes(bin[12..20].try_into().expect("8 bytes")) as usize;
    if count != meta.n_values || bin.len() != HEADER_LEN + 4 * count {
        return Err(corrupt(format!(
            "{} bytes for {} values (manifest says {})",
            bin.len(),
            count,
            meta.n_values
        )));
    }
    if super::sha256_hex(&bin) != meta.data_sha256 {
        return Err(corrupt("checksum mismatch".into()));
    }
    let mut values = Vec::with_capacity(meta.params.len());
    let mut off = HEADER_LEN;
    for p in &meta.params {
        let n: usize = p.shape.iter().product();
        ensure!(
            off + 4 * n <= bin.len(),
            Incompatible,
            "parameter {} overruns the data",
            p.name
        );
        let data: Vec<f32> = bin[off..off + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        off += 4 * n;
        values.push((p.name.clone(), Tensor::new(&p.shape, data)?));
    }
    ensure!(
        off == bin.len(),
        Incompatible,
        "parameter shapes do not cover the data"
    );
    let net = SeldNet::from_values(meta.config.clone(), meta.kind, values)?;
    for (p, e) in net.params().iter().zip(&meta.params) {
        ensure!(
            p.name == e.name && p.trainable == e.trainable,
            Incompatible,
            "parameter order differs at {}",
            e.name
        );
    }
    Ok((net, meta))
}
