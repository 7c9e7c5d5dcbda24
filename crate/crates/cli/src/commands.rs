use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use seld::dsp::FeatureConfig;
use seld::metrics::{evaluate, ClipEval, EvalReport};
use seld::model::{BranchKind, SeldNet};
use seld::spatial::{derive_seed, synthesize_scene, MicArrayGeometry};
use seld::store::{
    events_to_labels, labels_from_scene, load_checkpoint, read_labels_csv, read_predictions_csv,
    save_checkpoint, write_history_csv, write_labels_csv, write_metrics_csv, write_predictions_csv,
    write_wav, ClipEntry, DatasetManifest, FeatureCache, MetricsRow, RunDir, Split,
    MANIFEST_VERSION,
};
use seld::training::{
    assign_splits, infer_clip, load_clips, secs_to_frames, train_regime, with_workers, AudioFormat,
    ClipData, ClipInference, Regime, SegmentPredictor, TrainConfig, TrainData, TrainOutput,
};
use seld::{Error, Result};

use crate::args::*;
use crate::config::*;

pub fn dataset_manifest(root: &Path) -> PathBuf {
    root.join("dataset").join("manifest.json")
}

fn runs_root(root: &Path) -> PathBuf {
    root.join("runs")
}

fn cache_for(root: &Path) -> FeatureCache {
    FeatureCache::new(root.join("cache").join("features"))
}

/// A missing file that the command needs from an earlier step.
fn prerequisite(e: Error, hint: &str) -> Error {
    match e {
        Error::NotFound(p) => {
            Error::MissingPrerequisite(format!("{} does not exist ({hint})", p.display()))
        }
        e => e,
    }
}

fn resolve_synth(a: &SynthArgs) -> Result<SynthConfig> {
    let cfg = SynthConfig::default_with(
        a.clips,
        a.duration,
        a.classes,
        a.seed,
        a.snr,
        a.val_fraction,
    );
    let cfg = with_file(cfg, a.config.as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = resolve_synth(a)?;
    echo("synth", &cfg)?;
    write_dataset(&a.common.out, &cfg, a.common.workers)
}

fn write_dataset(root: &Path, cfg: &SynthConfig, workers: usize) -> Result<()> {
    let dir = root.join("dataset");
    for sub in ["audio", "labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d)
            .map_err(|e| Error::InvalidArgument(format!("cannot create {}: {e}", d.display())))?;
    }
    let geom = MicArrayGeometry::tetrahedral(cfg.d_max);
    let ids: Vec<String> = (0..cfg.clips).map(|k| format!("clip{k:04}")).collect();
    let splits = assign_splits(&ids, cfg.val_fraction, cfg.seed);
    let n = cfg.generator.n_classes;
    let clips: Vec<ClipEntry> = with_workers(workers, || {
        ids.par_iter()
            .enumerate()
            .map(|(k, id)| {
                let seed = derive_seed(cfg.seed, k as u64);
                let spec = cfg.generator.generate(seed)?;
                let scene = synthesize_scene(&spec, &geom, SAMPLE_RATE, n)?;
                let foa = Path::new("audio").join(format!("{id}_foa.wav"));
                let mic = Path::new("audio").join(format!("{id}_mic.wav"));
                let labels = Path::new("labels").join(format!("{id}.csv"));
                write_wav(&dir.join(&foa), &scene.foa)?;
                write_wav(&dir.join(&mic), &scene.mic)?;
                write_labels_csv(&dir.join(&labels), &labels_from_scene(&spec))?;
                Ok(ClipEntry {
                    id: id.clone(),
                    foa,
                    mic,
                    labels,
                    duration: spec.duration,
                    split: splits[k],
                    seed,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        sample_rate: SAMPLE_RATE,
        classes: seld::spatial::class_names(n),
        geometry: geom,
        generator: Some(cfg.generator.clone()),
        master_seed: cfg.seed,
        clips,
    };
    manifest.write(&dir.join("manifest.json"))?;
    let n_val = manifest.clips_in(Split::Val).count();
    println!(
        "wrote {} clips ({} train, {n_val} val) to {}",
        manifest.clips.len(),
        manifest.clips.len() - n_val,
        dir.display()
    );
    Ok(())
}

fn read_dataset(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::read(path).map_err(|e| prerequisite(e, "run `seld synth` first"))
}

pub fn features(a: &FeaturesArgs) -> Result<()> {
    let path = dataset_manifest(&a.common.out);
    let m = read_dataset(&path)?;
    let feat = features_with(a.n_mels);
    echo("features", &feat)?;
    extract_all(
        &a.common.out,
        &path,
        &m,
        format_of(a.format),
        &feat,
        a.common.workers,
    )
}

fn extract_all(
    root: &Path,
    path: &Path,
    m: &DatasetManifest,
    fmt: AudioFormat,
    feat: &FeatureConfig,
    workers: usize,
) -> Result<()> {
    let cache = cache_for(root);
    let clips = load_clips(path, m, None, fmt, feat, Some(&cache), workers)?;
    println!(
        "{} clips in {} ({} cached, {} extracted)",
        clips.len(),
        cache.dir().display(),
        cache.hits(),
        cache.misses()
    );
    Ok(())
}

fn resolve_train(a: &TrainArgs) -> Result<(RunConfig, DatasetManifest)> {
    let dataset = a
        .dataset
        .clone()
        .unwrap_or_else(|| dataset_manifest(&a.common.out));
    let m = read_dataset(&dataset)?;
    let feat = features_with(a.n_mels.unwrap_or(64));
    let n_mics = m.geometry.n_mics();
    let input = seld::dsp::channel_layout(n_mics).len();
    let mut model = preset_model(a.preset.unwrap_or(PresetArg::Desk), m.n_classes(), input);
    model.n_mels = feat.n_mels;
    if let Some(c) = &a.conv_channels {
        model.conv_channels = c.clone();
    }
    model.use_gru = !a.no_gru;
    if let Some(w) = a.joint_weight {
        model.joint_loss_weight = w;
    }
    if let Some(t) = a.sed_threshold {
        model.sed_threshold = t;
    }
    let d = TrainConfig::default();
    let train = TrainConfig {
        regime: a.regime.map(regime_of).unwrap_or(d.regime),
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        decay_start_epoch: a.decay_start_epoch.unwrap_or(d.decay_start_epoch),
        decay_factor: a.decay_factor.unwrap_or(d.decay_factor),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        segment_len: a.segment_len.unwrap_or(d.segment_len),
        segment_hop: a.segment_hop.unwrap_or(d.segment_hop),
        seed: a.seed.unwrap_or(d.seed),
        sed_checkpoint: a.sed_checkpoint.clone(),
    };
    let cfg = RunConfig {
        dataset,
        format: a.format.map(format_of).unwrap_or(AudioFormat::Foa),
        features: feat,
        model,
        train,
    };
    let cfg = with_file(cfg, a.config.as_deref())?;
    cfg.validate(n_mics)?;
    Ok((cfg, m))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let (cfg, m) = resolve_train(a)?;
    echo("run", &cfg)?;
    let id = a.run_id.clone().unwrap_or_else(|| cfg.default_run_id());
    train_run(&a.common.out, &id, &cfg, &m, a.common.workers)?;
    Ok(())
}

fn train_run(
    root: &Path,
    id: &str,
    cfg: &RunConfig,
    m: &DatasetManifest,
    workers: usize,
) -> Result<RunDir> {
    if cfg.train.regime == Regime::DoaTransfer {
        let p = cfg.train.sed_checkpoint.as_ref().ok_or_else(|| {
            Error::MissingPrerequisite(
                "doa_transfer needs --sed-checkpoint pointing at a trained SED branch".into(),
            )
        })?;
        let meta = seld::store::read_checkpoint_meta(p)
            .map_err(|e| prerequisite(e, "train the sed regime first"))?;
        meta.ensure_compatible(&cfg.model)?;
    }
    let run = RunDir::create(&runs_root(root), id, cfg)?;
    let cache = cache_for(root);
    let load = |split| {
        load_clips(
            &cfg.dataset,
            m,
            Some(split),
            cfg.format,
            &cfg.features,
            Some(&cache),
            workers,
        )
    };
    let (train, val) = (load(Split::Train)?, load(Split::Val)?);
    eprintln!(
        "run {id}: {} training clips, {} validation clips",
        train.len(),
        val.len()
    );
    let epochs = cfg.train.epochs;
    let mut progress = |h: &seld::store::HistoryRow| {
        eprintln!(
            "{} epoch {}/{}  lr {:.3e}  loss {:.5}  val_loss {}  val_f {}  val_doa {}",
            h.stage,
            h.epoch + 1,
            epochs,
            h.lr,
            h.train_loss,
            opt(h.val_loss, 5),
            opt(h.val_f, 3),
            opt(h.val_doa_deg, 2)
        )
    };
    let out = train_regime(
        &cfg.model,
        &cfg.train,
        TrainData {
            train: &train,
            val: &val,
        },
        None,
        &mut progress,
    )?;
    write_history_csv(&run.history_path(), &out.history)?;
    save_outputs(&run, cfg, &out)?;
    println!("run {id} trained; artifacts in {}", run.path().display());
    Ok(run)
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

fn save_outputs(run: &RunDir, cfg: &RunConfig, out: &TrainOutput) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("run_id".to_string(), run.id().to_string());
    meta.insert("regime".to_string(), cfg.train.regime.to_string());
    meta.insert("format".to_string(), cfg.format.as_str().to_string());
    meta.insert("epochs".to_string(), cfg.train.epochs.to_string());
    meta.insert("seed".to_string(), cfg.train.seed.to_string());
    meta.insert("features".to_string(), cfg.features.fingerprint());
    meta.insert("selection".to_string(), "final".to_string());
    for (name, net) in [("sed", &out.sed), ("doa", &out.doa), ("joint", &out.joint)] {
        if let Some(net) = net {
            save_checkpoint(net, &run.checkpoint_path(name), &meta)?;
        }
    }
    for b in &out.best {
        let mut meta = meta.clone();
        meta.insert("selection".to_string(), "best_val".to_string());
        meta.insert("epoch".to_string(), b.epoch.to_string());
        meta.insert("val_loss".to_string(), format!("{:e}", b.val_loss));
        save_checkpoint(
            &b.net,
            &run.checkpoint_path(&format!("{}_best", b.stage)),
            &meta,
        )?;
    }
    Ok(())
}

fn split_of(s: SplitArg) -> Option<Split> {
    match s {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Val => Some(Split::Val),
        SplitArg::All => None,
    }
}

fn open_run(root: &Path, id: &str) -> Result<(RunDir, RunConfig)> {
    let run =
        RunDir::open(&runs_root(root), id).map_err(|e| prerequisite(e, "train the run first"))?;
    let cfg: RunConfig = run.read_config()?;
    Ok((run, cfg))
}

fn load_branch(path: &Path, kind: BranchKind, cfg: &RunConfig) -> Result<SeldNet<f32>> {
    let (net, meta) =
        load_checkpoint(path, Some(kind)).map_err(|e| prerequisite(e, "missing checkpoint"))?;
    meta.ensure_compatible(&cfg.model)?;
    Ok(net)
}

/// SED and DOA networks for inference.
struct Models {
    sed: SeldNet<f32>,
    doa: Option<SeldNet<f32>>,
}

fn models_for(run: &RunDir, cfg: &RunConfig, sed_override: Option<&Path>) -> Result<Models> {
    let has = |name: &str| run.checkpoint_path(name).with_extension("json").is_file();
    if has("joint") {
        return Ok(Models {
            sed: load_branch(&run.checkpoint_path("joint"), BranchKind::Joint, cfg)?,
            doa: None,
        });
    }
    let sed_path = match sed_override {
        Some(p) => p.to_path_buf(),
        None if has("sed") => run.checkpoint_path("sed"),
        None => {
            return Err(Error::MissingPrerequisite(format!(
                "run {} has no SED checkpoint; pass --sed-checkpoint for the mask",
                run.id()
            )))
        }
    };
    let sed = load_branch(&sed_path, BranchKind::Sed, cfg)?;
    let doa = if has("doa") {
        Some(load_branch(
            &run.checkpoint_path("doa"),
            BranchKind::Doa,
            cfg,
        )?)
    } else {
        None
    };
    Ok(Models { sed, doa })
}

fn predictions_dir(run: &RunDir, fmt: AudioFormat) -> PathBuf {
    run.predictions_dir().join(fmt.as_str())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let (run, cfg) = open_run(&a.common.out, &a.run_id)?;
    let fmt = a.format.map(format_of).unwrap_or(cfg.format);
    run_inference(
        &a.common.out,
        &run,
        &cfg,
        fmt,
        split_of(a.split),
        a.sed_checkpoint.as_deref(),
        a.common.workers,
    )
}

fn run_inference(
    root: &Path,
    run: &RunDir,
    cfg: &RunConfig,
    fmt: AudioFormat,
    split: Option<Split>,
    sed_override: Option<&Path>,
    workers: usize,
) -> Result<()> {
    if fmt != cfg.format {
        log::warn!(
            "run {} was trained on {} features; running it on {}",
            run.id(),
            cfg.format.as_str(),
            fmt.as_str()
        );
    }
    let models = models_for(run, cfg, sed_override)?;
    let m = read_dataset(&cfg.dataset)?;
    let cache = cache_for(root);
    let clips = load_clips(
        &cfg.dataset,
        &m,
        split,
        fmt,
        &cfg.features,
        Some(&cache),
        workers,
    )?;
    let (len, hop) = (
        secs_to_frames(cfg.train.segment_len),
        secs_to_frames(cfg.train.segment_hop),
    );
    let dir = predictions_dir(run, fmt);
    let threshold = cfg.model.sed_threshold;
    with_workers(workers, || {
        clips.par_iter().try_for_each(|c: &ClipData| {
            let doa = models.doa.as_ref().map(|d| d as &dyn SegmentPredictor);
            let inf = infer_clip(&c.id, &c.features, &models.sed, doa, len, hop, threshold)?;
            write_predictions_csv(&dir.join(format!("{}.csv", c.id)), &inf.to_rows())
        })
    })?;
    println!("predictions for {} clips in {}", clips.len(), dir.display());
    Ok(())
}

pub fn eval(a: &InferArgs) -> Result<()> {
    let (run, cfg) = open_run(&a.common.out, &a.run_id)?;
    let fmt = a.format.map(format_of).unwrap_or(cfg.format);
    let report = score_run(&run, &cfg, fmt, split_of(a.split))?;
    println!("{}", summary_line(run.id(), fmt, &report));
    Ok(())
}

/// The metrics file of a run for one rendering.
pub fn metrics_path(run: &RunDir, cfg: &RunConfig, fmt: AudioFormat) -> PathBuf {
    if fmt == cfg.format {
        run.metrics_path()
    } else {
        run.path().join(format!("metrics_{}.csv", fmt.as_str()))
    }
}

pub fn clip_eval(
    run: &RunDir,
    fmt: AudioFormat,
    manifest_path: &Path,
    m: &DatasetManifest,
    entry: &ClipEntry,
) -> Result<(ClipInference, ClipEval, seld::spatial::FrameLabels)> {
    let pred_path = predictions_dir(run, fmt).join(format!("{}.csv", entry.id));
    let rows =
        read_predictions_csv(&pred_path).map_err(|e| prerequisite(e, "run `seld infer` first"))?;
    let inf = ClipInference::from_rows(entry.id.clone(), m.n_classes(), &rows)?;
    let events = read_labels_csv(&DatasetManifest::resolve(manifest_path, &entry.labels))?;
    let labels = events_to_labels(
        &events,
        inf.n_frames,
        m.n_classes(),
        seld::training::FRAME_RATE,
    )?;
    let e = inf.to_eval(&labels)?;
    Ok((inf, e, labels))
}

fn score_run(
    run: &RunDir,
    cfg: &RunConfig,
    fmt: AudioFormat,
    split: Option<Split>,
) -> Result<EvalReport> {
    let m = read_dataset(&cfg.dataset)?;
    let entries: Vec<&ClipEntry> = m
        .clips
        .iter()
        .filter(|c| split.map_or(true, |s| c.split == s))
        .collect();
    if entries.is_empty() {
        return Err(Error::InvalidArgument(
            "no clips in the requested split".into(),
        ));
    }
    let mut evals = Vec::with_capacity(entries.len());
    let mut rows = Vec::with_capacity(entries.len() + 1);
    for entry in entries {
        let (_, e, _) = clip_eval(run, fmt, &cfg.dataset, &m, entry)?;
        rows.push(metrics_row(&entry.id, &evaluate(std::slice::from_ref(&e))?));
        evals.push(e);
    }
    let pooled = evaluate(&evals)?;
    rows.push(metrics_row("all", &pooled));
    write_metrics_csv(&metrics_path(run, cfg, fmt), &rows)?;
    Ok(pooled)
}

fn metrics_row(id: &str, r: &EvalReport) -> MetricsRow {
    MetricsRow {
        id: id.to_string(),
        er: r.er,
        f: r.f,
        map: r.map,
        doa_deg: r.doa_error_deg,
        frame_recall: r.frame_recall,
        matched_pairs: r.matched_pairs,
    }
}

pub fn summary_line(id: &str, fmt: AudioFormat, r: &EvalReport) -> String {
    format!(
        "{id} [{}]  ER {:.3}  F {:.3}  mAP {}  DOA {}  FR {:.3}",
        fmt.as_str(),
        r.er,
        r.f,
        opt(r.map, 3),
        opt(r.doa_error_deg, 2),
        r.frame_recall
    )
}

pub fn report(a: &ReportArgs) -> Result<()> {
    if a.run_ids.is_empty() {
        return Err(Error::InvalidArgument(
            "report needs at least one --run-id".into(),
        ));
    }
    let out_dir = a.out.join("report");
    let mut table = Vec::with_capacity(a.run_ids.len());
    for id in &a.run_ids {
        let (run, cfg) = open_run(&a.out, id)?;
        let rows = seld::store::read_metrics_csv(&run.metrics_path())
            .map_err(|e| prerequisite(e, "run `seld eval` first"))?;
        let all = rows.into_iter().find(|r| r.id == "all").ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{} has no pooled row",
                run.metrics_path().display()
            ))
        })?;
        table.push(crate::report::ComparisonRow::new(
            id,
            cfg.train.regime,
            cfg.format,
            &all,
        ));

        let m = read_dataset(&cfg.dataset)?;
        let pred_dir = predictions_dir(&run, cfg.format);
        let clips: Vec<String> = if a.clips.is_empty() {
            let mut names: Vec<String> = fs::read_dir(&pred_dir)
                .map_err(|_| Error::MissingPrerequisite(format!("{} has no predictions", id)))?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    e.file_name()
                        .to_str()
                        .and_then(|n| n.strip_suffix(".csv"))
                        .map(str::to_string)
                })
                .collect();
            names.sort();
            names.truncate(1);
            names
        } else {
            a.clips.clone()
        };
        for clip in clips {
            let entry = m
                .clip(&clip)
                .ok_or_else(|| Error::InvalidArgument(format!("dataset has no clip {clip}")))?;
            let (inf, _, labels) = clip_eval(&run, cfg.format, &cfg.dataset, &m, entry)?;
            let svg =
                crate::report::timeline_svg(&format!("{id} / {clip}"), &inf, &labels, &m.classes);
            let path = out_dir.join(format!("{id}_{clip}.svg"));
            fs::create_dir_all(&out_dir)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", out_dir.display())))?;
            fs::write(&path, svg)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
            println!("wrote {}", path.display());
        }
    }
    let csv_path = out_dir.join("comparison.csv");
    crate::report::write_comparison(&csv_path, &table)?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

pub fn pipeline(a: &PipelineArgs) -> Result<()> {
    let root = &a.synth.common.out;
    let workers = a.synth.common.workers;
    let synth_cfg = resolve_synth(&a.synth)?;
    echo("synth", &synth_cfg)?;
    write_dataset(root, &synth_cfg, workers)?;

    let t = &a.train;
    let train_args = TrainArgs {
        common: a.synth.common.clone(),
        regime: Some(RegimeArg::TwoStage),
        format: t.format,
        epochs: t.epochs,
        lr: t.lr,
        decay_start_epoch: None,
        decay_factor: None,
        batch_size: t.batch_size,
        segment_len: None,
        segment_hop: None,
        seed: Some(t.train_seed.unwrap_or(synth_cfg.seed)),
        sed_checkpoint: None,
        preset: t.preset,
        conv_channels: t.conv_channels.clone(),
        n_mels: t.n_mels,
        no_gru: false,
        joint_weight: None,
        sed_threshold: None,
        run_id: t.run_id.clone(),
        dataset: None,
        config: t.train_config.clone(),
    };
    let (cfg, m) = resolve_train(&train_args)?;
    echo("run", &cfg)?;
    extract_all(root, &cfg.dataset, &m, cfg.format, &cfg.features, workers)?;
    let id = t.run_id.clone().unwrap_or_else(|| cfg.default_run_id());
    let run = train_run(root, &id, &cfg, &m, workers)?;
    run_inference(
        root,
        &run,
        &cfg,
        cfg.format,
        Some(Split::Val),
        None,
        workers,
    )?;
    let report = score_run(&run, &cfg, cfg.format, Some(Split::Val))?;
    println!("{}", summary_line(&id, cfg.format, &report));
    Ok(())
}
