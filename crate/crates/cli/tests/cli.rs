use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: &[&str] = &[
    "--epochs",
    "1",
    "--batch-size",
    "4",
    "--conv-channels",
    "4,4,8,8",
    "--n-mels",
    "16",
];
const REGIMES: [&str; 4] = ["sed", "doa_transfer", "doa_nt", "joint"];

fn seld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seld"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = seld(args);
    assert!(
        out.status.success(),
        "seld {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, clips: usize) {
    ok(&[
        "synth",
        "--out",
        s(out),
        "--clips",
        &clips.to_string(),
        "--duration",
        "3",
        "--classes",
        "4",
        "--val-fraction",
        "0.25",
    ]);
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// A dataset with all four regimes trained, inferred and evaluated.
fn trained() -> &'static Path {
    static ROOT: OnceLock<PathBuf> = OnceLock::new();
    ROOT.get_or_init(|| {
        let root = scratch("four-regimes");
        synth(&root, 8);
        let out = s(&root).to_string();
        let sed_ckpt = root.join("runs/sed-foa-s0/ckpt_sed");
        for regime in REGIMES {
            let mut args = vec!["train", "--out", &out, "--regime", regime];
            args.extend_from_slice(TINY);
            let ck = sed_ckpt.to_str().unwrap().to_string();
            if regime == "doa_transfer" {
                args.extend(["--sed-checkpoint", &ck]);
            }
            let regime_flag = regime.replace('_', "-");
            args[4] = &regime_flag;
            ok(&args);
            let id = format!("{regime}-foa-s0");
            let mut infer = vec!["infer", "--out", &out, "--run-id", &id];
            if regime == "doa_nt" {
                infer.extend(["--sed-checkpoint", &ck]);
            }
            ok(&infer);
            ok(&["eval", "--out", &out, "--run-id", &id]);
        }
        root
    })
}

#[test]
fn synth_writes_every_clip_in_both_formats() {
    let root = scratch("synth-count");
    synth(&root, 5);
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(root.join("dataset/manifest.json")).unwrap()).unwrap();
    let clips = m["clips"].as_array().unwrap();
    assert_eq!(clips.len(), 5);
    assert_eq!(
        fs::read_dir(root.join("dataset/audio")).unwrap().count(),
        10
    );
    assert_eq!(
        fs::read_dir(root.join("dataset/labels")).unwrap().count(),
        5
    );
    let val = clips.iter().filter(|c| c["split"] == "val").count();
    assert_eq!(val, 2, "ceil(0.25 * 5) clips held out");
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let (a, b) = (scratch("synth-a"), scratch("synth-b"));
    synth(&a, 3);
    synth(&b, 3);
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert_eq!(sa.len(), 10);
    assert!(sa == sb, "datasets differ");
    let c = scratch("synth-c");
    ok(&[
        "synth",
        "--out",
        s(&c),
        "--clips",
        "3",
        "--duration",
        "3",
        "--classes",
        "4",
        "--seed",
        "1",
        "--val-fraction",
        "0.25",
    ]);
    assert!(snapshot(&c) != sa);
}

#[test]
fn doa_transfer_without_sed_checkpoint_exits_3() {
    let root = scratch("transfer-missing");
    synth(&root, 4);
    let mut args = vec!["train", "--out", s(&root), "--regime", "doa-transfer"];
    args.extend_from_slice(TINY);
    let out = seld(&args);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(
        !root.join("runs").exists(),
        "no run directory before prerequisites hold"
    );

    let ghost = root.join("nowhere/ckpt_sed");
    args.extend(["--sed-checkpoint", s(&ghost)]);
    assert_eq!(code(&seld(&args)), 3);
}

#[test]
fn doa_nt_inference_needs_a_mask() {
    let root = trained();
    let out = seld(&["infer", "--out", s(root), "--run-id", "doa_nt-foa-s0"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn metrics_csv_has_per_clip_rows_and_a_pooled_row() {
    let root = trained();
    for regime in REGIMES {
        let text =
            fs::read_to_string(root.join(format!("runs/{regime}-foa-s0/metrics.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "id,er,f,map,doa_deg,frame_recall,matched_pairs"
        );
        let ids: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(ids.len(), 3, "two validation clips plus the pooled row");
        assert_eq!(ids.last(), Some(&"all"));
    }
}

#[test]
fn run_directory_holds_config_history_and_checkpoints() {
    let root = trained();
    let run = root.join("runs/doa_transfer-foa-s0");
    for f in [
        "config.json",
        "history.csv",
        "ckpt_sed.json",
        "ckpt_sed.bin",
        "ckpt_doa.json",
        "ckpt_doa.bin",
        "ckpt_doa_best.bin",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(root.join("runs/joint-foa-s0/ckpt_joint.bin").is_file());
    assert!(root.join("runs/joint-foa-s0/ckpt_joint_best.bin").is_file());
    let best: serde_json::Value =
        serde_json::from_slice(&fs::read(root.join("runs/sed-foa-s0/ckpt_sed_best.json")).unwrap())
            .unwrap();
    assert_eq!(best["metadata"]["selection"], "best_val");
    assert_eq!(best["metadata"]["epoch"], "0");
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("stage,epoch,lr,train_loss,val_loss,val_er,val_f,val_doa_deg"));
}

#[test]
fn report_compares_four_regimes_and_is_deterministic() {
    let root = trained();
    let mut args = vec!["report", "--out", s(root)];
    let ids: Vec<String> = REGIMES.iter().map(|r| format!("{r}-foa-s0")).collect();
    for id in &ids {
        args.extend(["--run-id", id.as_str()]);
    }
    ok(&args);
    let first = snapshot(&root.join("report"));
    ok(&args);
    assert!(
        snapshot(&root.join("report")) == first,
        "report output changed between runs"
    );

    let table = fs::read_to_string(root.join("report/comparison.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(
        rows[0],
        "run_id,regime,format,er,f,map,doa_deg,frame_recall"
    );
    assert_eq!(rows.len(), 5);
    for (row, regime) in rows[1..].iter().zip(REGIMES) {
        assert!(
            row.starts_with(&format!("{regime}-foa-s0,{regime},foa,")),
            "{row}"
        );
    }

    let svgs: Vec<_> = first
        .iter()
        .filter(|(p, _)| p.extension().is_some_and(|e| e == "svg"))
        .collect();
    assert_eq!(svgs.len(), 4);
    for (_, bytes) in svgs {
        let svg = String::from_utf8(bytes.clone()).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains(r#"id="sed-panel""#) && svg.contains(r#"id="azimuth-panel""#));
    }
}

#[test]
fn report_with_no_runs_exits_2() {
    let root = scratch("empty-report");
    assert_eq!(code(&seld(&["report", "--out", s(&root)])), 2);
    assert_eq!(
        code(&seld(&["report", "--out", s(&root), "--run-id", "ghost"])),
        3
    );
}

#[test]
fn cross_format_eval_writes_its_own_metrics_file() {
    let root = trained();
    let out = s(root);
    ok(&[
        "infer",
        "--out",
        out,
        "--run-id",
        "sed-foa-s0",
        "--format",
        "mic",
    ]);
    ok(&[
        "eval",
        "--out",
        out,
        "--run-id",
        "sed-foa-s0",
        "--format",
        "mic",
    ]);
    assert!(root.join("runs/sed-foa-s0/metrics_mic.csv").is_file());
}

#[test]
fn unknown_flags_and_config_keys_are_rejected() {
    let root = scratch("unknown");
    assert_eq!(
        code(&seld(&["synth", "--out", s(&root), "--frobnicate"])),
        2
    );
    assert_eq!(
        code(&seld(&["train", "--out", s(&root), "--regime", "teleport"])),
        2
    );
    fs::create_dir_all(&root).unwrap();
    let cfg = root.join("synth.json");
    fs::write(&cfg, r#"{"generator": {"n_clases": 3}}"#).unwrap();
    let out = seld(&["synth", "--out", s(&root), "--config", s(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_clases"));
}

#[test]
fn config_file_overrides_flags() {
    let root = scratch("override");
    fs::create_dir_all(&root).unwrap();
    let cfg = root.join("synth.json");
    fs::write(&cfg, r#"{"clips": 2, "generator": {"duration": 2.5}}"#).unwrap();
    let out = ok(&[
        "synth",
        "--out",
        s(&root),
        "--clips",
        "9",
        "--config",
        s(&cfg),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"duration\": 2.5"));
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(root.join("dataset/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["clips"].as_array().unwrap().len(), 2);
}

#[test]
fn unwritable_output_exits_2() {
    let root = scratch("unwritable");
    fs::create_dir_all(&root).unwrap();
    let file = root.join("plain-file");
    fs::write(&file, b"x").unwrap();
    let out = seld(&[
        "synth",
        "--out",
        s(&file),
        "--clips",
        "2",
        "--duration",
        "2",
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_is_reproducible() {
    let (a, b) = (scratch("pipe-a"), scratch("pipe-b"));
    for root in [&a, &b] {
        let mut args = vec![
            "pipeline",
            "--out",
            s(root),
            "--clips",
            "6",
            "--duration",
            "3",
            "--classes",
            "4",
            "--val-fraction",
            "0.34",
        ];
        args.extend_from_slice(TINY);
        ok(&args);
    }
    let run = "runs/two_stage-foa-s0";
    for f in ["ckpt_sed.bin", "ckpt_doa.bin", "metrics.csv", "history.csv"] {
        let (x, y) = (
            fs::read(a.join(run).join(f)).unwrap(),
            fs::read(b.join(run).join(f)).unwrap(),
        );
        assert!(x == y, "{f} differs between identical pipelines");
    }
}
