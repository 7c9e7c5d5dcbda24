use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Regime, TrainConfig};
use super::data::{assemble_batch, secs_to_frames, segment_clips, ClipData};
use super::infer::{inference_windows, window_batch, OverlapAccumulator};
use crate::autodiff::{AdamConfig, Graph};
use crate::error::{ensure, Error, Result};
use crate::metrics::{evaluate, ClipEval};
use crate::model::{branch_loss, transfer_cnn, BranchKind, SeldConfig, SeldNet};
use crate::spatial::derive_seed;
use crate::store::{load_checkpoint, HistoryRow};

/// Seed of every fresh network in a run. Branches built from it share feature-layer,
/// recurrent and SED-head init.
pub fn model_seed(cfg: &TrainConfig) -> u64 {
    derive_seed(cfg.seed, 0)
}

fn shuffle_seed(cfg: &TrainConfig, epoch: usize) -> u64 {
    derive_seed(derive_seed(cfg.seed, 1), epoch as u64)
}

/// Networks produced by a run; absent branches are `None`.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub sed: Option<SeldNet<f32>>,
    pub doa: Option<SeldNet<f32>>,
    pub joint: Option<SeldNet<f32>>,
    /// Lowest-validation-loss snapshot of each branch trained here.
    pub best: Vec<BestSnapshot>,
    pub history: Vec<HistoryRow>,
}

#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub stage: String,
    pub epoch: usize,
    pub val_loss: f64,
    pub net: SeldNet<f32>,
}

/// Train and validation clips.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [ClipData],
    pub val: &'a [ClipData],
}

/// Called after every epoch.
pub type Progress<'a> = &'a mut dyn FnMut(&HistoryRow);

/// Initial network of `kind`. With `transfer_from`, feature layers are copied from it.
pub fn init_branch(
    model: &SeldConfig,
    kind: BranchKind,
    cfg: &TrainConfig,
    transfer_from: Option<&SeldNet<f32>>,
) -> Result<SeldNet<f32>> {
    let mut net = SeldNet::new(model.clone(), kind, model_seed(cfg))?;
    if let Some(src) = transfer_from {
        transfer_cnn(src, &mut net)?;
    }
    Ok(net)
}

/// Trains `net` for `cfg.epochs` epochs on segments of `data.train` with Adam and the
/// configured schedule. Segment order is reshuffled every epoch from the run seed; the
/// trailing partial batch is dropped.
pub fn train_branch(
    net: &mut SeldNet<f32>,
    stage: &str,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    progress: Progress<'_>,
) -> Result<Vec<HistoryRow>> {
    Ok(train_tracking_best(net, stage, data, cfg, progress)?.0)
}

/// [`train_branch`], also returning the epoch with the lowest validation loss (ties keep
/// the earlier epoch). Without validation clips there is no snapshot.
pub fn train_tracking_best(
    net: &mut SeldNet<f32>,
    stage: &str,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    progress: Progress<'_>,
) -> Result<(Vec<HistoryRow>, Option<BestSnapshot>)> {
    cfg.validate()?;
    let (len, hop) = (
        secs_to_frames(cfg.segment_len),
        secs_to_frames(cfg.segment_hop),
    );
    let segments = segment_clips(data.train, len, hop)?;
    let n_batches = segments.len() / cfg.batch_size;
    ensure!(
        n_batches >= 1,
        InvalidArgument,
        "{} training segments do not fill one batch of {}",
        segments.len(),
        cfg.batch_size
    );
    let adam = AdamConfig::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestSnapshot> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..segments.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed(cfg, epoch)));
        let mut total = 0.0;
        for b in 0..n_batches {
            let picked: Vec<_> = order[b * cfg.batch_size..(b + 1) * cfg.batch_size]
                .iter()
                .map(|&i| segments[i])
                .collect();
            let batch = assemble_batch(data.train, &picked)?;
            let mut g = Graph::new();
            let bound = net.params().bind(&mut g, true);
            let x = g.leaf(batch.features, false);
            let fwd = net.forward(&mut g, &bound, x, true)?;
            let loss = branch_loss(&mut g, net, &fwd, &batch.sed, &batch.doa)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{stage} loss {value} at epoch {epoch}, batch {b}"
                )));
            }
            total += value;
            g.backward(loss)?;
            net.params_mut().adam_step(&g, &bound, lr, &adam)?;
            net.update_running_stats(&fwd);
        }
        let mut row = HistoryRow {
            stage: stage.to_string(),
            epoch,
            lr,
            train_loss: total / n_batches as f64,
            val_loss: None,
            val_er: None,
            val_f: None,
            val_doa_deg: None,
        };
        if !data.val.is_empty() {
            validate(net, data.val, cfg, &mut row)?;
        }
        log::info!(
            "{stage} epoch {epoch} lr {lr:.3e} loss {:.5} val_loss {:?}",
            row.train_loss,
            row.val_loss
        );
        if let Some(v) = row.val_loss {
            if best.as_ref().map_or(true, |b| v < b.val_loss) {
                best = Some(BestSnapshot {
                    stage: stage.to_string(),
                    epoch,
                    val_loss: v,
                    net: net.clone(),
                });
            }
        }
        progress(&row);
        history.push(row);
    }
    Ok((history, best))
}

/// Eval-mode loss and metrics on the validation clips. DOA error is measured on the
/// reference-active cells, so it does not depend on an SED branch.
fn validate(
    net: &SeldNet<f32>,
    val: &[ClipData],
    cfg: &TrainConfig,
    row: &mut HistoryRow,
) -> Result<()> {
    let (len, hop) = (
        secs_to_frames(cfg.segment_len),
        secs_to_frames(cfg.segment_hop),
    );
    let n = net.config().n_classes;
    let (mut loss_sum, mut windows_seen) = (0.0, 0usize);
    let mut evals = Vec::with_capacity(val.len());
    for clip in val {
        let windows = inference_windows(clip.n_frames(), len, hop);
        let mut acc = OverlapAccumulator::new(clip.n_frames(), n);
        for chunk in windows.chunks(super::infer::INFER_BATCH) {
            let wl = chunk[0].1;
            let mut sed_t = Vec::with_capacity(chunk.len() * wl * n);
            let mut doa_t = Vec::with_capacity(2 * chunk.len() * wl * n);
            for &(s, l) in chunk {
                let lab = clip.labels.slice(s, l);
                sed_t.extend_from_slice(lab.sed());
                doa_t.extend_from_slice(lab.doa());
            }
            let mut g = Graph::new();
            let bound = net.params().bind(&mut g, false);
            let x = g.leaf(window_batch(&clip.features, chunk)?, false);
            let fwd = net.forward(&mut g, &bound, x, false)?;
            let loss = branch_loss(&mut g, net, &fwd, &sed_t, &doa_t)?;
            loss_sum += g.value(loss).item() as f64 * chunk.len() as f64;
            windows_seen += chunk.len();
            let sed = fwd.sed.map(|v| g.value(v).data().to_vec());
            let doa = fwd.doa.map(|v| g.value(v).data().to_vec());
            let cell = wl * n;
            for (b, &(start, _)) in chunk.iter().enumerate() {
                acc.add(
                    start,
                    wl,
                    sed.as_ref().map(|s| &s[b * cell..(b + 1) * cell]),
                    doa.as_ref().map(|d| &d[2 * b * cell..2 * (b + 1) * cell]),
                )?;
            }
        }
        let inf = acc.finish(clip.id.clone(), net.config().sed_threshold);
        let mut e: ClipEval = inf.to_eval(&clip.labels)?;
        if !net.kind().has_sed() {
            e.pred_act = e.ref_act.clone();
            e.scores = e.ref_act.iter().map(|&a| a as u8 as f32).collect();
        }
        evals.push(e);
    }
    let val_loss = loss_sum / windows_seen as f64;
    ensure!(
        val_loss.is_finite(),
        NonFinite,
        "validation loss {val_loss}"
    );
    let report = evaluate(&evals)?;
    row.val_loss = Some(val_loss);
    if net.kind().has_sed() {
        row.val_er = Some(report.er);
        row.val_f = Some(report.f);
    }
    if net.kind().has_doa() {
        row.val_doa_deg = report.doa_error_deg;
    }
    Ok(())
}

/// Runs one regime. `doa_transfer` takes its SED network from `sed` or, failing that, from
/// `cfg.sed_checkpoint`; with neither it fails with `MissingPrerequisite`.
pub fn train_regime(
    model: &SeldConfig,
    cfg: &TrainConfig,
    data: TrainData<'_>,
    sed: Option<&SeldNet<f32>>,
    progress: Progress<'_>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    model.validate()?;
    let mut out = TrainOutput::default();
    let best;
    match cfg.regime {
        Regime::Sed => {
            let mut net = init_branch(model, BranchKind::Sed, cfg, None)?;
            (out.history, best) = train_tracking_best(&mut net, "sed", data, cfg, progress)?;
            out.sed = Some(net);
        }
        Regime::DoaNt => {
            let mut net = init_branch(model, BranchKind::Doa, cfg, None)?;
            (out.history, best) = train_tracking_best(&mut net, "doa", data, cfg, progress)?;
            out.doa = Some(net);
        }
        Regime::DoaTransfer => {
            let loaded;
            let src = match sed {
                Some(s) => s,
                None => {
                    loaded = load_sed_prerequisite(cfg)?;
                    &loaded
                }
            };
            let mut net = init_branch(model, BranchKind::Doa, cfg, Some(src))?;
            (out.history, best) = train_tracking_best(&mut net, "doa", data, cfg, progress)?;
            out.doa = Some(net);
            out.sed = Some(src.clone());
        }
        Regime::Joint => {
            let mut net = init_branch(model, BranchKind::Joint, cfg, None)?;
            (out.history, best) = train_tracking_best(&mut net, "joint", data, cfg, progress)?;
            out.joint = Some(net);
        }
        Regime::TwoStage => return train_two_stage(model, cfg, data, progress),
    }
    out.best.extend(best);
    Ok(out)
}

fn load_sed_prerequisite(cfg: &TrainConfig) -> Result<SeldNet<f32>> {
    let path = cfg.sed_checkpoint.as_ref().ok_or_else(|| {
        Error::MissingPrerequisite(
            "doa_transfer needs a trained SED checkpoint (sed_checkpoint)".into(),
        )
    })?;
    match load_checkpoint(path, Some(BranchKind::Sed)) {
        Ok((net, _)) => Ok(net),
        Err(Error::NotFound(p)) => Err(Error::MissingPrerequisite(format!(
            "SED checkpoint {} does not exist",
            p.display()
        ))),
        Err(e) => Err(e),
    }
}

/// Stage 1 trains the SED branch; stage 2 copies its feature layers into a fresh DOA
/// branch and trains that with the reference-masked DOA loss. The SED branch is frozen
/// during stage 2.
pub fn train_two_stage(
    model: &SeldConfig,
    cfg: &TrainConfig,
    data: TrainData<'_>,
    progress: Progress<'_>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut sed = init_branch(model, BranchKind::Sed, cfg, None)?;
    let (mut history, best_sed) = train_tracking_best(&mut sed, "sed", data, cfg, progress)?;
    let mut doa = init_branch(model, BranchKind::Doa, cfg, Some(&sed))?;
    let (h, best_doa) = train_tracking_best(&mut doa, "doa", data, cfg, progress)?;
    history.extend(h);
    Ok(TrainOutput {
        sed: Some(sed),
        doa: Some(doa),
        joint: None,
        best: best_sed.into_iter().chain(best_doa).collect(),
        history,
    })
}
