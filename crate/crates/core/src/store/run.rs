use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Summary of one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: serde_json::Value,
    /// Checkpoint name (the part after `ckpt_`) to its base path.
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub history: PathBuf,
    pub metrics: PathBuf,
}

/// `runs/<id>/` with `config.json`, `history.csv`, `ckpt_*.{json,bin}`, `metrics.csv`
/// and per-clip `predictions/`.
#[derive(Debug, Clone)]
pub struct RunDir {
    id: String,
    dir: PathBuf,
}

impl RunDir {
    /// Creates the run and snapshots `config`. Reopening an existing id succeeds only when
    /// the stored snapshot is byte-identical.
    pub fn create<C: Serialize>(runs_root: &Path, id: &str, config: &C) -> Result<Self> {
        ensure!(
            !id.is_empty() && !id.contains(['/', '\\']) && id != "." && id != "..",
            InvalidArgument,
            "run id {id:?} is not a plain name"
        );
        let dir = runs_root.join(id);
        let mut snapshot = serde_json::to_vec_pretty(config)?;
        snapshot.push(b'\n');
        let cfg_path = dir.join("config.json");
        if cfg_path.exists() {
            let old = super::read_bytes(&cfg_path)?;
            ensure!(
                old == snapshot,
                InvalidArgument,
                "run {id} already exists with a different configuration"
            );
        } else {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            super::atomic_write(&cfg_path, &snapshot)?;
        }
        Ok(Self {
            id: id.to_string(),
            dir,
        })
    }

    pub fn open(runs_root: &Path, id: &str) -> Result<Self> {
        let dir = runs_root.join(id);
        let cfg = dir.join("config.json");
        if !cfg.is_file() {
            return Err(Error::NotFound(cfg));
        }
        Ok(Self {
            id: id.to_string(),
            dir,
        })
    }

    /// Opens a run directory given its own path.
    pub fn at(dir: &Path) -> Result<Self> {
        let id = dir.file_name().and_then(|n| n.to_str()).ok_or_else(|| {
            Error::InvalidArgument(format!("{} is not a run directory", dir.display()))
        })?;
        Self::open(dir.parent().unwrap_or(Path::new("")), id)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn config_path(&self) -> PathBuf {
        self.dir.join("config.json")
    }

    pub fn history_path(&self) -> PathBuf {
        self.dir.join("history.csv")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    /// Base path of `ckpt_<name>`; the store adds `.json` and `.bin`.
    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("ckpt_{name}"))
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.dir.join("predictions")
    }

    pub fn read_config<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_slice(&super::read_bytes(
            &self.config_path(),
        )?)?)
    }

    pub fn record(&self) -> Result<RunRecord> {
        let mut checkpoints = BTreeMap::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let p = entry.map_err(|e| Error::io(&self.dir, e))?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if let Some(stem) = name
                .strip_prefix("ckpt_")
                .and_then(|n| n.strip_suffix(".json"))
            {
                checkpoints.insert(stem.to_string(), p.with_extension(""));
            }
        }
        Ok(RunRecord {
            run_id: self.id.clone(),
            config: self.read_config()?,
            checkpoints,
            history: self.history_path(),
            metrics: self.metrics_path(),
        })
    }
}

/// One epoch of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_er: Option<f64>,
    pub val_f: Option<f64>,
    pub val_doa_deg: Option<f64>,
}

/// One line of `metrics.csv`; `id` is a clip id or `all` for the pooled row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub er: f64,
    pub f: f64,
    pub map: Option<f64>,
    pub doa_deg: Option<f64>,
    pub frame_recall: f64,
    pub matched_pairs: usize,
}

/// Per-cell inference output of one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub frame: usize,
    pub class_id: usize,
    pub score: f32,
    pub active: bool,
    pub azimuth_deg: Option<f32>,
    pub elevation_deg: Option<f32>,
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        wr.write_record(header)?;
    }
    for r in rows {
        wr.serialize(r)?;
    }
    let bytes = wr
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    super::atomic_write(path, &bytes)
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = super::read_bytes(path)?;
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    write_rows(
        path,
        rows,
        &[
            "stage",
            "epoch",
            "lr",
            "train_loss",
            "val_loss",
            "val_er",
            "val_f",
            "val_doa_deg",
        ],
    )
}

pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    read_rows(path)
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_rows(
        path,
        rows,
        &[
            "id",
            "er",
            "f",
            "map",
            "doa_deg",
            "frame_recall",
            "matched_pairs",
        ],
    )
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    read_rows(path)
}

pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    write_rows(
        path,
        rows,
        &[
            "frame",
            "class_id",
            "score",
            "active",
            "azimuth_deg",
            "elevation_deg",
        ],
    )
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRow>> {
    read_rows(path)
}
