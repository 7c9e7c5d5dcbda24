use crate::autodiff::Tensor;
use crate::dsp::FeatureTensor;
use crate::error::{ensure, Error, Result};
use crate::metrics::ClipEval;
use crate::model::{sed_mask, SeldNet};
use crate::spatial::FrameLabels;
use crate::store::PredictionRow;

/// Windows per forward call during inference.
pub const INFER_BATCH: usize = 16;

/// Outputs for a batch of segments.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOutput {
    /// `B x L x N` probabilities.
    pub sed: Option<Vec<f32>>,
    /// `B x L x N x 2` radians.
    pub doa: Option<Vec<f32>>,
}

/// Anything that maps `B x C x L x F` segment features to per-frame outputs.
pub trait SegmentPredictor: Sync {
    fn n_classes(&self) -> usize;
    fn predict_segments(&self, x: Tensor<f32>) -> Result<SegmentOutput>;
}

impl SegmentPredictor for SeldNet<f32> {
    fn n_classes(&self) -> usize {
        self.config().n_classes
    }

    fn predict_segments(&self, x: Tensor<f32>) -> Result<SegmentOutput> {
        let p = self.predict(x)?;
        Ok(SegmentOutput {
            sed: p.sed,
            doa: p.doa,
        })
    }
}

/// Window starts covering every frame: a `hop` grid plus one window flush with the end
/// when the grid falls short. Clips shorter than `len` get one window of their own length.
pub fn inference_windows(n_frames: usize, len: usize, hop: usize) -> Vec<(usize, usize)> {
    if n_frames <= len {
        return vec![(0, n_frames)];
    }
    let mut starts: Vec<usize> = (0..=(n_frames - len) / hop).map(|k| k * hop).collect();
    if starts.last().map_or(true, |&s| s + len < n_frames) {
        starts.push(n_frames - len);
    }
    starts.into_iter().map(|s| (s, len)).collect()
}

/// Running sums for overlap averaging. Azimuth is averaged on the circle.
#[derive(Debug, Clone)]
pub struct OverlapAccumulator {
    n_frames: usize,
    n_classes: usize,
    sed: Vec<f64>,
    sed_count: Vec<u32>,
    az_sin: Vec<f64>,
    az_cos: Vec<f64>,
    el: Vec<f64>,
    doa_count: Vec<u32>,
}

impl OverlapAccumulator {
    pub fn new(n_frames: usize, n_classes: usize) -> Self {
        let cells = n_frames * n_classes;
        Self {
            n_frames,
            n_classes,
            sed: vec![0.0; cells],
            sed_count: vec![0; n_frames],
            az_sin: vec![0.0; cells],
            az_cos: vec![0.0; cells],
            el: vec![0.0; cells],
            doa_count: vec![0; n_frames],
        }
    }

    /// Adds one window's `len x N` scores and/or `len x N x 2` angles starting at `start`.
    pub fn add(
        &mut self,
        start: usize,
        len: usize,
        sed: Option<&[f32]>,
        doa: Option<&[f32]>,
    ) -> Result<()> {
        let n = self.n_classes;
        ensure!(
            start + len <= self.n_frames,
            Shape,
            "window runs past the clip"
        );
        if let Some(s) = sed {
            ensure!(
                s.len() == len * n,
                Shape,
                "{} scores for a {len}-frame window",
                s.len()
            );
            for t in 0..len {
                for c in 0..n {
                    self.sed[(start + t) * n + c] += s[t * n + c] as f64;
                }
                self.sed_count[start + t] += 1;
            }
        }
        if let Some(d) = doa {
            ensure!(
                d.len() == 2 * len * n,
                Shape,
                "{} angles for a {len}-frame window",
                d.len()
            );
            for t in 0..len {
                for c in 0..n {
                    let k = (start + t) * n + c;
                    let (az, el) = (d[2 * (t * n + c)] as f64, d[2 * (t * n + c) + 1] as f64);
                    self.az_sin[k] += az.sin();
                    self.az_cos[k] += az.cos();
                    self.el[k] += el;
                }
                self.doa_count[start + t] += 1;
            }
        }
        Ok(())
    }

    /// Mean scores and angles, thresholded after averaging. Frames never covered score 0.
    pub fn finish(self, id: impl Into<String>, threshold: f64) -> ClipInference {
        let n = self.n_classes;
        let scores: Vec<f32> = self
            .sed
            .iter()
            .enumerate()
            .map(|(k, &s)| match self.sed_count[k / n] {
                0 => 0.0,
                m => (s / m as f64) as f32,
            })
            .collect();
        let mut doa = vec![0.0f32; 2 * scores.len()];
        for k in 0..scores.len() {
            let m = self.doa_count[k / n];
            if m > 0 {
                doa[2 * k] = self.az_sin[k].atan2(self.az_cos[k]) as f32;
                doa[2 * k + 1] = (self.el[k] / m as f64) as f32;
            }
        }
        let active = sed_mask(&scores, threshold);
        ClipInference {
            id: id.into(),
            n_frames: self.n_frames,
            n_classes: n,
            scores,
            active,
            doa,
        }
    }
}

/// Clip-level outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipInference {
    pub id: String,
    pub n_frames: usize,
    pub n_classes: usize,
    /// `T x N` averaged probabilities.
    pub scores: Vec<f32>,
    /// `T x N`, `scores >= threshold`.
    pub active: Vec<bool>,
    /// `T x N x 2` radians; meaningful where `active`.
    pub doa: Vec<f32>,
}

impl ClipInference {
    /// CSV rows; angles only on active cells.
    pub fn to_rows(&self) -> Vec<PredictionRow> {
        let n = self.n_classes;
        (0..self.n_frames * n)
            .map(|k| {
                let on = self.active[k];
                PredictionRow {
                    frame: k / n,
                    class_id: k % n,
                    score: self.scores[k],
                    active: on,
                    azimuth_deg: on.then(|| self.doa[2 * k].to_degrees()),
                    elevation_deg: on.then(|| self.doa[2 * k + 1].to_degrees()),
                }
            })
            .collect()
    }

    pub fn from_rows(
        id: impl Into<String>,
        n_classes: usize,
        rows: &[PredictionRow],
    ) -> Result<Self> {
        ensure!(n_classes > 0, InvalidArgument, "no classes");
        let n_frames = rows.iter().map(|r| r.frame + 1).max().unwrap_or(0);
        ensure!(
            rows.len() == n_frames * n_classes,
            Shape,
            "{} rows for {n_frames} frames of {n_classes} classes",
            rows.len()
        );
        let mut out = Self {
            id: id.into(),
            n_frames,
            n_classes,
            scores: vec![0.0; rows.len()],
            active: vec![false; rows.len()],
            doa: vec![0.0; 2 * rows.len()],
        };
        for r in rows {
            ensure!(
                r.class_id < n_classes,
                Shape,
                "class {} out of range",
                r.class_id
            );
            let k = r.frame * n_classes + r.class_id;
            out.scores[k] = r.score;
            out.active[k] = r.active;
            out.doa[2 * k] = r.azimuth_deg.unwrap_or(0.0).to_radians();
            out.doa[2 * k + 1] = r.elevation_deg.unwrap_or(0.0).to_radians();
        }
        Ok(out)
    }

    /// Pairs predictions with reference labels, cropping to the shorter of the two.
    pub fn to_eval(&self, labels: &FrameLabels) -> Result<ClipEval> {
        ensure!(
            labels.n_classes() == self.n_classes,
            Shape,
            "labels have {} classes, predictions {}",
            labels.n_classes(),
            self.n_classes
        );
        let cells = self.n_frames.min(labels.n_frames()) * self.n_classes;
        Ok(ClipEval {
            id: self.id.clone(),
            n_classes: self.n_classes,
            scores: self.scores[..cells].to_vec(),
            pred_act: self.active[..cells].to_vec(),
            pred_doa: self.doa[..2 * cells].to_vec(),
            ref_act: labels.sed()[..cells].iter().map(|&v| v > 0.5).collect(),
            ref_doa: labels.doa()[..2 * cells].to_vec(),
        })
    }
}

/// Slices `B x C x L x F` input for `windows` of one clip.
pub fn window_batch(features: &FeatureTensor, windows: &[(usize, usize)]) -> Result<Tensor<f32>> {
    let (c, _, f) = features.dims();
    let len = windows[0].1;
    let mut x = Vec::with_capacity(windows.len() * c * len * f);
    for &(s, l) in windows {
        ensure!(l == len, Shape, "windows of one batch must share a length");
        features.copy_frames_into(s, l, &mut x);
    }
    Tensor::new(&[windows.len(), c, len, f], x)
}

/// Overlapped-window inference on one clip. SED scores come from `sed`; angles come from
/// `doa` when given, otherwise from `sed`'s own DOA head if it has one.
pub fn infer_clip(
    id: &str,
    features: &FeatureTensor,
    sed: &dyn SegmentPredictor,
    doa: Option<&dyn SegmentPredictor>,
    len: usize,
    hop: usize,
    threshold: f64,
) -> Result<ClipInference> {
    ensure!(
        len > 0 && hop > 0,
        InvalidArgument,
        "window length and hop must be positive"
    );
    let n = sed.n_classes();
    if let Some(d) = doa {
        ensure!(
            d.n_classes() == n,
            Incompatible,
            "SED and DOA models disagree on class count"
        );
    }
    let windows = inference_windows(features.n_frames(), len, hop);
    let mut acc = OverlapAccumulator::new(features.n_frames(), n);
    for chunk in windows.chunks(INFER_BATCH) {
        let x = window_batch(features, chunk)?;
        let wl = chunk[0].1;
        let s_out = sed.predict_segments(x.clone())?;
        let scores = s_out
            .sed
            .ok_or_else(|| Error::InvalidArgument("SED model has no SED head".into()))?;
        let angles = match doa {
            Some(d) => d.predict_segments(x)?.doa,
            None => s_out.doa,
        };
        for (b, &(start, _)) in chunk.iter().enumerate() {
            let cell = wl * n;
            acc.add(
                start,
                wl,
                Some(&scores[b * cell..(b + 1) * cell]),
                angles
                    .as_ref()
                    .map(|a| &a[2 * b * cell..2 * (b + 1) * cell]),
            )?;
        }
    }
    Ok(acc.finish(id, threshold))
}
