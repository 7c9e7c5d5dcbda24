//! Detection and localization scores: segment ER/F, frame mAP, DOA error, frame recall.
//!
//! Activity matrices are frame-major `frames x classes` slices.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Frames per one-second segment at 100 frames per second.
pub const SEGMENT_FRAMES: usize = 100;

fn check_matrix<T>(m: &[T], n_classes: usize, what: &str) -> Result<usize> {
    ensure!(n_classes > 0, InvalidArgument, "need at least one class");
    ensure!(
        m.len() % n_classes == 0,
        Shape,
        "{what} has {} cells, not a multiple of {n_classes} classes",
        m.len()
    );
    Ok(m.len() / n_classes)
}

/// Any-pooling of frame activity into segments of `segment_len` frames; a trailing partial
/// segment counts as a segment.
pub fn segment_activity(
    frames: &[bool],
    n_classes: usize,
    segment_len: usize,
) -> Result<Vec<bool>> {
    ensure!(
        segment_len > 0,
        InvalidArgument,
        "segment length must be positive"
    );
    let t = check_matrix(frames, n_classes, "activity")?;
    let k = t.div_ceil(segment_len);
    let mut out = vec![false; k * n_classes];
    for f in 0..t {
        let seg = f / segment_len;
        for c in 0..n_classes {
            out[seg * n_classes + c] |= frames[f * n_classes + c];
        }
    }
    Ok(out)
}

/// Counts of one segment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SegmentStats {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub subs: usize,
    pub dels: usize,
    pub ins: usize,
    pub n_ref: usize,
}

impl SegmentStats {
    fn from_counts(tp: usize, fp: usize, fn_: usize, n_ref: usize) -> Self {
        Self {
            tp,
            fp,
            fn_,
            subs: fn_.min(fp),
            dels: fn_.saturating_sub(fp),
            ins: fp.saturating_sub(fn_),
            n_ref,
        }
    }

    fn add(&mut self, o: &Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.subs += o.subs;
        self.dels += o.dels;
        self.ins += o.ins;
        self.n_ref += o.n_ref;
    }
}

/// Per-segment counts of `K x N` segment activities.
pub fn segment_stats(
    ref_seg: &[bool],
    pred_seg: &[bool],
    n_classes: usize,
) -> Result<Vec<SegmentStats>> {
    let k = check_matrix(ref_seg, n_classes, "reference")?;
    ensure!(
        pred_seg.len() == ref_seg.len(),
        Shape,
        "prediction has {} cells, reference {}",
        pred_seg.len(),
        ref_seg.len()
    );
    Ok((0..k)
        .map(|s| {
            let (mut tp, mut fp, mut fn_, mut n_ref) = (0, 0, 0, 0);
            for c in 0..n_classes {
                let (r, p) = (ref_seg[s * n_classes + c], pred_seg[s * n_classes + c]);
                n_ref += r as usize;
                match (r, p) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            SegmentStats::from_counts(tp, fp, fn_, n_ref)
        })
        .collect())
}

/// Pooled segment counts with their error rate and F-score.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErF {
    pub er: f64,
    pub f: f64,
    pub totals: SegmentStats,
}

impl ErF {
    pub fn from_totals(t: SegmentStats) -> Self {
        let er = if t.n_ref == 0 {
            t.ins as f64
        } else {
            (t.subs + t.dels + t.ins) as f64 / t.n_ref as f64
        };
        let f = if t.tp == 0 {
            0.0
        } else {
            2.0 * t.tp as f64 / (2 * t.tp + t.fp + t.fn_) as f64
        };
        Self { er, f, totals: t }
    }
}

/// Micro-averaged segment error rate and F-score.
pub fn sed_er_f(ref_seg: &[bool], pred_seg: &[bool], n_classes: usize) -> Result<ErF> {
    let mut totals = SegmentStats::default();
    for s in segment_stats(ref_seg, pred_seg, n_classes)? {
        totals.add(&s);
    }
    Ok(ErF::from_totals(totals))
}

/// Average precision of one score column; `None` without positives.
pub fn average_precision(scores: &[f32], reference: &[bool]) -> Result<Option<f64>> {
    ensure!(
        scores.len() == reference.len(),
        Shape,
        "scores and reference differ in length"
    );
    ensure!(scores.iter().all(|s| s.is_finite()), NonFinite, "scores");
    let positives = reference.iter().filter(|&&r| r).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable: equal scores keep frame order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if reference[i] {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(ap / positives as f64))
}

/// Frame-level mAP and per-class AP (`None` for classes without positives).
pub fn frame_map_per_class(
    scores: &[f32],
    reference: &[bool],
    n_classes: usize,
) -> Result<(f64, Vec<Option<f64>>)> {
    let t = check_matrix(reference, n_classes, "reference")?;
    ensure!(
        scores.len() == reference.len(),
        Shape,
        "scores and reference differ in size"
    );
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let col_s: Vec<f32> = (0..t).map(|f| scores[f * n_classes + c]).collect();
        let col_r: Vec<bool> = (0..t).map(|f| reference[f * n_classes + c]).collect();
        per_class.push(average_precision(&col_s, &col_r)?);
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    ensure!(
        !defined.is_empty(),
        InvalidArgument,
        "mAP undefined: no class has a positive frame"
    );
    Ok((
        defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
    ))
}

/// Macro-averaged frame-level mAP over classes with at least one positive frame.
pub fn frame_map(scores: &[f32], reference: &[bool], n_classes: usize) -> Result<f64> {
    frame_map_per_class(scores, reference, n_classes).map(|(m, _)| m)
}

/// Great-circle angle between two (azimuth, elevation) pairs in radians, in degrees.
pub fn angular_distance_deg(a: [f64; 2], b: [f64; 2]) -> f64 {
    let cos = a[1].sin() * b[1].sin() + a[1].cos() * b[1].cos() * (a[0] - b[0]).cos();
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Sum and count of angular errors over matched (predicted and reference active) cells.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DoaError {
    pub sum_deg: f64,
    pub matched: usize,
}

impl DoaError {
    /// Mean error, absent without matched cells.
    pub fn mean_deg(&self) -> Option<f64> {
        (self.matched > 0).then(|| self.sum_deg / self.matched as f64)
    }

    pub fn merge(&mut self, o: &Self) {
        self.sum_deg += o.sum_deg;
        self.matched += o.matched;
    }
}

/// Class-aware DOA error over cells active in both prediction and reference.
pub fn doa_error(
    pred_doa: &[f32],
    pred_act: &[bool],
    ref_doa: &[f32],
    ref_act: &[bool],
    n_classes: usize,
) -> Result<DoaError> {
    check_matrix(ref_act, n_classes, "reference activity")?;
    ensure!(
        pred_act.len() == ref_act.len()
            && pred_doa.len() == 2 * ref_act.len()
            && ref_doa.len() == pred_doa.len(),
        Shape,
        "DOA arrays do not match {} activity cells",
        ref_act.len()
    );
    let mut out = DoaError::default();
    for k in 0..ref_act.len() {
        if pred_act[k] && ref_act[k] {
            let p = [pred_doa[2 * k] as f64, pred_doa[2 * k + 1] as f64];
            let r = [ref_doa[2 * k] as f64, ref_doa[2 * k + 1] as f64];
            out.sum_deg += angular_distance_deg(p, r);
            out.matched += 1;
        }
    }
    Ok(out)
}

/// Count of frames whose number of active classes matches the reference, and frame total.
pub fn frame_recall_counts(
    pred_act: &[bool],
    ref_act: &[bool],
    n_classes: usize,
) -> Result<(usize, usize)> {
    let t = check_matrix(ref_act, n_classes, "reference activity")?;
    ensure!(
        pred_act.len() == ref_act.len(),
        Shape,
        "activity matrices differ in size"
    );
    let hits = (0..t)
        .filter(|&f| {
            let row = f * n_classes..(f + 1) * n_classes;
            let p = pred_act[row.clone()].iter().filter(|&&v| v).count();
            let r = ref_act[row].iter().filter(|&&v| v).count();
            p == r
        })
        .count();
    Ok((hits, t))
}

/// Fraction of frames whose number of active classes matches the reference.
pub fn frame_recall(pred_act: &[bool], ref_act: &[bool], n_classes: usize) -> Result<f64> {
    let (hits, t) = frame_recall_counts(pred_act, ref_act, n_classes)?;
    ensure!(t > 0, InvalidArgument, "frame recall of an empty sequence");
    Ok(hits as f64 / t as f64)
}

/// System output and reference for one clip.
#[derive(Debug, Clone)]
pub struct ClipEval {
    pub id: String,
    pub n_classes: usize,
    /// `T x N` SED probabilities.
    pub scores: Vec<f32>,
    /// `T x N` thresholded activity.
    pub pred_act: Vec<bool>,
    /// `T x N x 2` radians.
    pub pred_doa: Vec<f32>,
    pub ref_act: Vec<bool>,
    pub ref_doa: Vec<f32>,
}

/// Scores for one clip or a pooled split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub er: f64,
    pub f: f64,
    /// Absent when no class has a positive frame.
    pub map: Option<f64>,
    /// Absent without matched cells.
    pub doa_error_deg: Option<f64>,
    pub frame_recall: f64,
    pub matched_pairs: usize,
    pub per_class: Vec<ClassReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub f: f64,
    pub ap: Option<f64>,
    pub doa_error_deg: Option<f64>,
}

fn column<T: Copy>(m: &[T], n: usize, c: usize, width: usize) -> Vec<T> {
    m.chunks(n * width)
        .flat_map(|row| row[c * width..(c + 1) * width].to_vec())
        .collect()
}

/// Pools every clip's frames and segments into one report. Segments never straddle clips.
pub fn evaluate(clips: &[ClipEval]) -> Result<EvalReport> {
    ensure!(!clips.is_empty(), InvalidArgument, "nothing to evaluate");
    let n = clips[0].n_classes;
    ensure!(
        clips.iter().all(|c| c.n_classes == n),
        InvalidArgument,
        "clips disagree on the class count"
    );
    let (mut ref_seg, mut pred_seg) = (Vec::new(), Vec::new());
    let (mut scores, mut ref_act, mut pred_act, mut pred_doa, mut ref_doa) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for c in clips {
        let t = check_matrix(&c.ref_act, n, "reference activity")?;
        ensure!(
            c.scores.len() == t * n
                && c.pred_act.len() == t * n
                && c.pred_doa.len() == 2 * t * n
                && c.ref_doa.len() == 2 * t * n,
            Shape,
            "clip {} arrays disagree with {t} frames",
            c.id
        );
        ref_seg.extend(segment_activity(&c.ref_act, n, SEGMENT_FRAMES)?);
        pred_seg.extend(segment_activity(&c.pred_act, n, SEGMENT_FRAMES)?);
        scores.extend_from_slice(&c.scores);
        ref_act.extend_from_slice(&c.ref_act);
        pred_act.extend_from_slice(&c.pred_act);
        pred_doa.extend_from_slice(&c.pred_doa);
        ref_doa.extend_from_slice(&c.ref_doa);
    }
    let erf = sed_er_f(&ref_seg, &pred_seg, n)?;
    let (map, aps) = match frame_map_per_class(&scores, &ref_act, n) {
        Ok((m, aps)) => (Some(m), aps),
        Err(Error::InvalidArgument(_)) => (None, vec![None; n]),
        Err(e) => return Err(e),
    };
    let doa = doa_error(&pred_doa, &pred_act, &ref_doa, &ref_act, n)?;
    let fr = frame_recall(&pred_act, &ref_act, n)?;
    let mut per_class = Vec::with_capacity(n);
    for (c, ap) in aps.into_iter().enumerate() {
        let f = sed_er_f(&column(&ref_seg, n, c, 1), &column(&pred_seg, n, c, 1), 1)?.f;
        let d = doa_error(
            &column(&pred_doa, n, c, 2),
            &column(&pred_act, n, c, 1),
            &column(&ref_doa, n, c, 2),
            &column(&ref_act, n, c, 1),
            1,
        )?;
        per_class.push(ClassReport {
            f,
            ap,
            doa_error_deg: d.mean_deg(),
        });
    }
    Ok(EvalReport {
        er: erf.er,
        f: erf.f,
        map,
        doa_error_deg: doa.mean_deg(),
        frame_recall: fr,
        matched_pairs: doa.matched,
        per_class,
    })
}
