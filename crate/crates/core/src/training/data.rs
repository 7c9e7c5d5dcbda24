use std::path::Path;

use rayon::prelude::*;

use super::config::AudioFormat;
use crate::autodiff::Tensor;
use crate::dsp::{extract_features, FeatureConfig, FeatureTensor};
use crate::error::{ensure, Result};
use crate::spatial::{derive_seed, FrameLabels};
use crate::store::{
    events_to_labels, read_labels_csv, read_wav, ClipEntry, DatasetManifest, FeatureCache, Split,
};

/// Label frames per second; feature frames share this rate.
pub const FRAME_RATE: f64 = 100.0;

/// One clip's network input and frame targets, aligned in time.
#[derive(Debug, Clone)]
pub struct ClipData {
    pub id: String,
    pub features: FeatureTensor,
    pub labels: FrameLabels,
}

impl ClipData {
    /// Crops features and labels to their common frame count.
    pub fn new(
        id: impl Into<String>,
        features: FeatureTensor,
        labels: FrameLabels,
    ) -> Result<Self> {
        let id = id.into();
        let t = features.n_frames().min(labels.n_frames());
        ensure!(t > 0, Shape, "clip {id} has no frames");
        let features = if features.n_frames() > t {
            let (c, _, f) = features.dims();
            let mut data = Vec::with_capacity(c * t * f);
            for ch in 0..c {
                data.extend_from_slice(&features.map(ch)[..t * f]);
            }
            FeatureTensor::new(data, c, t, f, features.roles().to_vec())?
        } else {
            features
        };
        let labels = if labels.n_frames() > t {
            labels.slice(0, t)
        } else {
            labels
        };
        Ok(Self {
            id,
            features,
            labels,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.features.n_frames()
    }
}

/// A window `[start, start + len)` of clip `clip`, in frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub clip: usize,
    pub start: usize,
    pub len: usize,
}

/// Seconds to frames at [`FRAME_RATE`].
pub fn secs_to_frames(secs: f64) -> usize {
    (secs * FRAME_RATE).round() as usize
}

/// Every full window of `len` frames stepped by `hop`; a trailing partial window is dropped.
pub fn segment_clips(clips: &[ClipData], len: usize, hop: usize) -> Result<Vec<Segment>> {
    ensure!(
        len > 0 && hop > 0,
        InvalidArgument,
        "segment length and hop must be positive"
    );
    let mut out = Vec::new();
    for (k, c) in clips.iter().enumerate() {
        ensure!(
            c.n_frames() >= len,
            InvalidArgument,
            "clip {} has {} frames, shorter than one {len}-frame segment",
            c.id,
            c.n_frames()
        );
        let n = (c.n_frames() - len) / hop + 1;
        out.extend((0..n).map(|i| Segment {
            clip: k,
            start: i * hop,
            len,
        }));
    }
    Ok(out)
}

/// Network input and targets for a list of equal-length segments.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `B x C x T x F`.
    pub features: Tensor<f32>,
    /// `B x T x N`.
    pub sed: Vec<f32>,
    /// `B x T x N x 2`.
    pub doa: Vec<f32>,
    /// `(clip id, first frame)` per row.
    pub provenance: Vec<(String, usize)>,
}

pub fn assemble_batch(clips: &[ClipData], segments: &[Segment]) -> Result<Batch> {
    ensure!(!segments.is_empty(), InvalidArgument, "empty batch");
    let len = segments[0].len;
    ensure!(
        segments.iter().all(|s| s.len == len),
        Shape,
        "segments in one batch must share a length"
    );
    let (c, _, f) = clips[segments[0].clip].features.dims();
    let mut x = Vec::with_capacity(segments.len() * c * len * f);
    let mut sed = Vec::new();
    let mut doa = Vec::new();
    let mut provenance = Vec::with_capacity(segments.len());
    for s in segments {
        let clip = &clips[s.clip];
        ensure!(
            clip.features.dims().0 == c && clip.features.dims().2 == f,
            Shape,
            "clip {} feature layout differs",
            clip.id
        );
        clip.features.copy_frames_into(s.start, s.len, &mut x);
        let lab = clip.labels.slice(s.start, s.len);
        sed.extend_from_slice(lab.sed());
        doa.extend_from_slice(lab.doa());
        provenance.push((clip.id.clone(), s.start));
    }
    Ok(Batch {
        features: Tensor::new(&[segments.len(), c, len, f], x)?,
        sed,
        doa,
        provenance,
    })
}

/// Picks `ceil(fraction * n)` validation ids by a seeded hash, independent of input order.
pub fn assign_splits(ids: &[String], fraction: f64, seed: u64) -> Vec<Split> {
    let n_val = ((fraction * ids.len() as f64).ceil() as usize).min(ids.len());
    let key = |id: &str| {
        let h = id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        });
        derive_seed(seed, h)
    };
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (key(&ids[i]), ids[i].clone()));
    let mut splits = vec![Split::Train; ids.len()];
    for &i in &order[..n_val] {
        splits[i] = Split::Val;
    }
    splits
}

fn load_clip(
    manifest_path: &Path,
    manifest: &DatasetManifest,
    entry: &ClipEntry,
    format: AudioFormat,
    feat: &FeatureConfig,
    cache: Option<&FeatureCache>,
) -> Result<ClipData> {
    let audio = match format {
        AudioFormat::Foa => &entry.foa,
        AudioFormat::Mic => &entry.mic,
    };
    let compute = || {
        let w = read_wav(&DatasetManifest::resolve(manifest_path, audio))?;
        extract_features(&w, feat)
    };
    let features = match cache {
        Some(c) => c.get_or_compute(&format!("{}.{}", entry.id, format.as_str()), feat, compute)?,
        None => compute()?,
    };
    let events = read_labels_csv(&DatasetManifest::resolve(manifest_path, &entry.labels))?;
    let labels = events_to_labels(
        &events,
        features.n_frames(),
        manifest.n_classes(),
        FRAME_RATE,
    )?;
    ClipData::new(entry.id.clone(), features, labels)
}

/// Loads every clip of `split` (all clips when `None`) in manifest order, extracting
/// features on `workers` threads.
pub fn load_clips(
    manifest_path: &Path,
    manifest: &DatasetManifest,
    split: Option<Split>,
    format: AudioFormat,
    feat: &FeatureConfig,
    cache: Option<&FeatureCache>,
    workers: usize,
) -> Result<Vec<ClipData>> {
    let entries: Vec<&ClipEntry> = manifest
        .clips
        .iter()
        .filter(|c| split.map_or(true, |s| c.split == s))
        .collect();
    with_workers(workers, || {
        entries
            .par_iter()
            .map(|e| load_clip(manifest_path, manifest, e, format, feat, cache))
            .collect()
    })
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
