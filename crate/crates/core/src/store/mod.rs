//! Persistence: dataset manifests, audio and label files, the feature cache,
//! checkpoints and run directories.
//!
//! Binary blobs are little-endian; manifests and sidecars are JSON; labels,
//! histories and metrics are CSV. Every path is passed in explicitly.

mod audio;
mod cache;
mod checkpoint;
mod labels;
mod manifest;
mod run;

pub use audio::{read_wav, write_wav};
pub use cache::{FeatureCache, CACHE_MAGIC, CACHE_VERSION};
pub use checkpoint::{
    load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta, ParamEntry,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use labels::{
    events_to_labels, labels_from_scene, read_labels_csv, write_labels_csv, LabelEvent,
};
pub use manifest::{ClipEntry, DatasetManifest, Split, MANIFEST_VERSION};
pub use run::{
    read_history_csv, read_metrics_csv, read_predictions_csv, write_history_csv, write_metrics_csv,
    write_predictions_csv, HistoryRow, MetricsRow, PredictionRow, RunDir, RunRecord,
};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
