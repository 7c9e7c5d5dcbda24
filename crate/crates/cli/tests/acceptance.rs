//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 6 and 7 train desk-scale models for hours on one core. They run
//! only with `SELD_ACCEPT_FULL=1`; otherwise their lines report a measured
//! runtime projection and stay red. The process exits non-zero when any
//! criterion that was evaluated fails.

use std::f64::consts::PI;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use seld::autodiff::{grad_check, GradCheckReport, Graph, GruVars, Tensor, Var};
use seld::dsp::{gcc_phat, stft, Waveform};
use seld::metrics::{doa_error, frame_map, frame_recall, sed_er_f, segment_activity};
use seld::model::{branch_loss, BranchKind, SeldConfig, SeldNet};
use seld::spatial::{simulate_mic_array, DoaAngle, MicArrayGeometry, PlaneWaveSource};
use seld::store::{read_history_csv, read_metrics_csv, HistoryRow, MetricsRow};

type Verdict = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

enum Line {
    Pass(String),
    Fail(String),
    /// Red, but not evaluated in this invocation.
    Skipped(String),
}

fn run(f: impl FnOnce() -> Verdict) -> Line {
    let start = Instant::now();
    let out = panic::catch_unwind(AssertUnwindSafe(f));
    let took = format!("{:.1}s", start.elapsed().as_secs_f64());
    match out {
        Ok(Ok(msg)) => Line::Pass(format!("{msg} [{took}]")),
        Ok(Err(msg)) => Line::Fail(format!("{msg} [{took}]")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Line::Fail(format!("panicked: {msg} [{took}]"))
        }
    }
}

fn main() {
    panic::set_hook(Box::new(|_| {}));
    let full = std::env::var("SELD_ACCEPT_FULL").is_ok_and(|v| v == "1");
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Line>)> = vec![
        ("1 gradient suite", Box::new(|| run(gradients))),
        (
            "2 gcc-phat delays and amplitude invariance",
            Box::new(|| run(gcc_delays)),
        ),
        (
            "3 array geometry vs analytic tdoa",
            Box::new(|| run(geometry)),
        ),
        ("4 metric fixtures", Box::new(|| run(metric_fixtures))),
        ("5 shape chain", Box::new(|| run(shape_chain))),
        (
            "6 end-to-end desk run",
            Box::new(move || if full { run(end_to_end) } else { projection() }),
        ),
        (
            "7 regime orderings",
            Box::new(move || {
                if full {
                    run(orderings)
                } else {
                    Line::Skipped(
                        "not evaluated: needs 12 desk trainings (set SELD_ACCEPT_FULL=1)".into(),
                    )
                }
            }),
        ),
        ("8 bit-identical pipeline", Box::new(|| run(reproducible))),
    ];
    let mut failed = 0;
    for (name, c) in criteria {
        match c() {
            Line::Pass(m) => println!("PASS  {name}: {m}"),
            Line::Fail(m) => {
                failed += 1;
                println!("FAIL  {name}: {m}");
            }
            Line::Skipped(m) => println!("FAIL  {name}: {m}"),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

const STEP: f64 = 1e-3;
const OP_TOL: f64 = 1e-5;
const GRU_TOL: f64 = 1e-4;
const SEEDS: [u64; 5] = [11, 12, 13, 14, 15];

type Probe = Box<dyn Fn(&mut Graph<f64>, &[Var], u64) -> seld::Result<Var>>;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Dot product with a fixed random direction.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> seld::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let w: Vec<f64> = (0..g.value(y).len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let p = g.mul_const(y, &w)?;
    Ok(g.sum(p))
}

/// Uniform values kept at least 0.05 away from zero (the ReLU kink).
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

fn gru_vars(v: &[Var]) -> (GruVars, GruVars) {
    let dir = |o: usize| GruVars {
        w_ih: v[o],
        w_hh: v[o + 1],
        b_ih: v[o + 2],
        b_hh: v[o + 3],
    };
    (dir(1), dir(5))
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, bool, Probe)> {
    fn p(f: impl Fn(&mut Graph<f64>, &[Var], u64) -> seld::Result<Var> + 'static) -> Probe {
        Box::new(f)
    }
    vec![
        (
            "add",
            vec![vec![3, 4], vec![3, 4]],
            false,
            p(|g, v, s| {
                let y = g.add(v[0], v[1])?;
                project(g, y, s)
            }),
        ),
        (
            "mul",
            vec![vec![3, 4], vec![3, 4]],
            false,
            p(|g, v, s| {
                let y = g.mul(v[0], v[1])?;
                project(g, y, s)
            }),
        ),
        (
            "scale",
            vec![vec![6]],
            false,
            p(|g, v, s| {
                let y = g.scale(v[0], -1.7);
                project(g, y, s)
            }),
        ),
        (
            "reshape",
            vec![vec![2, 6]],
            false,
            p(|g, v, s| {
                let y = g.reshape(v[0], &[3, 4])?;
                project(g, y, s)
            }),
        ),
        (
            "conv2d",
            vec![vec![2, 2, 4, 5], vec![3, 2, 3, 3], vec![3]],
            false,
            p(|g, v, s| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                project(g, y, s)
            }),
        ),
        (
            "batch_norm_train",
            vec![vec![3, 2, 3, 4], vec![2], vec![2]],
            false,
            p(|g, v, s| {
                let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                project(g, y, s)
            }),
        ),
        (
            "batch_norm_eval",
            vec![vec![3, 2, 3, 4], vec![2], vec![2]],
            false,
            p(|g, v, s| {
                let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)?;
                project(g, y, s)
            }),
        ),
        (
            "relu",
            vec![vec![40]],
            true,
            p(|g, v, s| {
                let y = g.relu(v[0]);
                project(g, y, s)
            }),
        ),
        (
            "sigmoid",
            vec![vec![40]],
            false,
            p(|g, v, s| {
                let y = g.sigmoid(v[0]);
                project(g, y, s)
            }),
        ),
        (
            "avg_pool_2x2",
            vec![vec![2, 2, 4, 6]],
            false,
            p(|g, v, s| {
                let y = g.avg_pool_2x2(v[0])?;
                project(g, y, s)
            }),
        ),
        (
            "mean_last",
            vec![vec![2, 3, 4, 5]],
            false,
            p(|g, v, s| {
                let y = g.mean_last(v[0])?;
                project(g, y, s)
            }),
        ),
        (
            "swap_last2",
            vec![vec![2, 3, 5]],
            false,
            p(|g, v, s| {
                let y = g.swap_last2(v[0])?;
                project(g, y, s)
            }),
        ),
        (
            "dense",
            vec![vec![2, 3, 4], vec![5, 4], vec![5]],
            false,
            p(|g, v, s| {
                let y = g.dense(v[0], v[1], v[2])?;
                project(g, y, s)
            }),
        ),
        (
            "repeat_axis1",
            vec![vec![2, 3, 4]],
            false,
            p(|g, v, s| {
                let y = g.repeat_axis1(v[0], 3)?;
                project(g, y, s)
            }),
        ),
        (
            "pad_edge",
            vec![vec![2, 3, 5]],
            false,
            p(|g, v, s| {
                let y = g.pad_edge(v[0], 1, 4)?;
                project(g, y, s)
            }),
        ),
        (
            "narrow",
            vec![vec![2, 6, 5]],
            false,
            p(|g, v, s| {
                let y = g.narrow(v[0], 1, 2, 3)?;
                project(g, y, s)
            }),
        ),
        (
            "bce_loss",
            vec![vec![3, 4]],
            false,
            p(|g, v, s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let t: Vec<f64> = (0..12).map(|_| rng.gen_range(0..2) as f64).collect();
                let y = g.sigmoid(v[0]);
                g.bce_loss(y, &t)
            }),
        ),
        (
            "masked_mae_loss",
            vec![vec![3, 4, 2]],
            true,
            p(|g, v, s| {
                // the target is zero, so off-kink inputs keep every |.| differentiable
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mask: Vec<f64> = (0..12).map(|_| rng.gen_range(0..2) as f64).collect();
                g.masked_mae_loss(v[0], &[0.0; 24], &mask)
            }),
        ),
    ]
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut worst_op: (f64, &str) = (0.0, "");
    for (name, shapes, kinked, probe) in op_cases() {
        for seed in SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<_> = shapes
                .iter()
                .map(|s| {
                    if kinked {
                        off_kink(s, &mut rng)
                    } else {
                        rand_t(s, &mut rng)
                    }
                })
                .collect();
            let r = grad_check(|g, v| probe(g, v, seed), &inputs, STEP, OP_TOL)
                .map_err(|e| e.to_string())?;
            check!(
                r.passed(),
                "{name} seed {seed}: {:.2e} at {:?}",
                r.max_rel_error,
                r.worst
            );
            if r.max_rel_error > worst_op.0 {
                worst_op = (r.max_rel_error, name);
            }
        }
    }

    let mut worst_gru: f64 = 0.0;
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (8, 4);
        let mut inputs = vec![rand_t(&[2, 5, d], &mut rng)];
        for _ in 0..2 {
            inputs.extend([
                rand_t(&[3 * h, d], &mut rng),
                rand_t(&[3 * h, h], &mut rng),
                rand_t(&[3 * h], &mut rng),
                rand_t(&[3 * h], &mut rng),
            ]);
        }
        let r = grad_check(
            |g, v| {
                let (f, b) = gru_vars(v);
                let y = g.bigru(v[0], f, b)?;
                project(g, y, seed)
            },
            &inputs,
            STEP,
            GRU_TOL,
        )
        .map_err(|e| e.to_string())?;
        check!(r.passed(), "bigru seed {seed}: {:.2e}", r.max_rel_error);
        worst_gru = worst_gru.max(r.max_rel_error);
    }

    let mut worst_branch: f64 = 0.0;
    for seed in SEEDS {
        let r = tiny_branch_check(seed)?;
        check!(
            r.passed(),
            "sed branch seed {seed}: {:.2e} at {:?}",
            r.max_rel_error,
            r.worst
        );
        check!(
            r.skipped_kinks * 20 < r.checked,
            "sed branch seed {seed}: {} kinks skipped",
            r.skipped_kinks
        );
        worst_branch = worst_branch.max(r.max_rel_error);
    }
    let took = start.elapsed();
    check!(took < Duration::from_secs(120), "took {took:?}");
    Ok(format!(
        "ops max {:.1e} ({}), bigru {worst_gru:.1e}, sed branch {worst_branch:.1e}, {} seeds",
        worst_op.0,
        worst_op.1,
        SEEDS.len()
    ))
}

fn tiny_branch_check(seed: u64) -> Result<GradCheckReport, String> {
    let (b, t, n) = (2, 16, 2);
    let cfg = SeldConfig {
        n_classes: n,
        conv_channels: vec![2, 2, 2, 4],
        use_gru: true,
        input_channels: 2,
        n_mels: 16,
        sed_threshold: 0.5,
        joint_loss_weight: 1.0,
    };
    let net = SeldNet::<f64>::new(cfg, BranchKind::Sed, seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let target: Vec<f64> = (0..b * t * n).map(|_| rng.gen_range(0..2) as f64).collect();
    let names: Vec<String> = net
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    let mut inputs: Vec<Tensor<f64>> = names
        .iter()
        .map(|nm| net.params().get(nm).unwrap().value.clone())
        .collect();
    inputs.push(rand_t(&[b, 2, t, 16], &mut rng));
    grad_check(
        |g, vars| {
            let bound = net.params().bind_with(g, &names, &vars[..names.len()]);
            let fwd = net.forward(g, &bound, vars[names.len()], true)?;
            branch_loss(g, &net, &fwd, &target, &[])
        },
        &inputs,
        1e-5,
        GRU_TOL,
    )
    .map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 2

const FS: usize = 32000;
const N_LAGS: usize = 64;

fn white(n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            (sigma * v) as f32
        })
        .collect()
}

/// Most frequent per-frame argmax, as a signed lag.
fn modal_lag(gcc: &[f32]) -> isize {
    let mut counts = [0usize; N_LAGS];
    for frame in gcc.chunks(N_LAGS) {
        let k = (0..N_LAGS)
            .max_by(|&a, &b| frame[a].total_cmp(&frame[b]))
            .unwrap();
        counts[k] += 1;
    }
    let best = (0..N_LAGS).fold(0, |m, k| if counts[k] > counts[m] { k } else { m });
    best as isize - (N_LAGS / 2) as isize
}

fn gcc_delays() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = FS / 2;
    let mut recovered = 0;
    let mut worst_shift: f32 = 0.0;
    for trial in 0..100 {
        let d = trial % 9 - 4;
        let x = white(n + 8, 0.1, &mut rng);
        // channel 1 hears the same noise d samples later; 20 dB SNR per channel
        let c0: Vec<f32> = x[4..4 + n]
            .iter()
            .zip(white(n, 0.01, &mut rng))
            .map(|(a, b)| a + b)
            .collect();
        let c1: Vec<f32> = (0..n)
            .map(|k| x[(4 + k as isize - d) as usize])
            .zip(white(n, 0.01, &mut rng))
            .map(|(a, b)| a + b)
            .collect();
        let w =
            Waveform::new(vec![c0.clone(), c1.clone()], FS as u32).map_err(|e| e.to_string())?;
        let spec = stft(&w, 1024, 320).map_err(|e| e.to_string())?;
        let gcc = gcc_phat(&spec, 0, 1, N_LAGS).map_err(|e| e.to_string())?;
        recovered += (modal_lag(&gcc) == d) as usize;

        let (g0, g1) = (rng.gen_range(0.05f32..20.0), rng.gen_range(0.05f32..20.0));
        let scaled = Waveform::new(
            vec![
                c0.iter().map(|v| v * g0).collect(),
                c1.iter().map(|v| v * g1).collect(),
            ],
            FS as u32,
        )
        .map_err(|e| e.to_string())?;
        let gs = gcc_phat(
            &stft(&scaled, 1024, 320).map_err(|e| e.to_string())?,
            0,
            1,
            N_LAGS,
        )
        .map_err(|e| e.to_string())?;
        for (a, b) in gcc.iter().zip(&gs) {
            worst_shift = worst_shift.max((a - b).abs());
        }
    }
    let took = start.elapsed();
    check!(recovered == 100, "{recovered}/100 delays recovered");
    check!(
        worst_shift <= 1e-5,
        "amplitude changed a cell by {worst_shift:.2e}"
    );
    check!(took < Duration::from_secs(60), "took {took:?}");
    Ok(format!(
        "100/100 delays recovered, max gain-induced change {worst_shift:.1e}"
    ))
}

// ---------------------------------------------------------------- 3

fn geometry() -> Verdict {
    let g = MicArrayGeometry::tetrahedral(0.0482);
    check!(
        (g.max_distance() - 0.0482).abs() < 1e-12,
        "d_max {}",
        g.max_distance()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut good = 0;
    for _ in 0..500 {
        let az = rng.gen_range(-PI..PI);
        let el = rng.gen_range(-1.0f64..1.0).asin();
        let doa = DoaAngle::new(az, el).map_err(|e| e.to_string())?;
        let src = PlaneWaveSource {
            signal: white(8000, 0.1, &mut rng),
            doa,
            onset: 0.0,
            class_id: 0,
        };
        let w = simulate_mic_array(&[src], &g, 0.25, FS as u32).map_err(|e| e.to_string())?;
        let spec = stft(&w, 1024, 320).map_err(|e| e.to_string())?;
        let u = doa.unit_vector();
        let mut all_pairs = true;
        for i in 0..4 {
            for j in i + 1..4 {
                let dp: f64 = (0..3)
                    .map(|k| u[k] * (g.positions[i][k] - g.positions[j][k]))
                    .sum();
                let tdoa = dp * FS as f64 / g.c;
                let lag = modal_lag(&gcc_phat(&spec, i, j, N_LAGS).map_err(|e| e.to_string())?);
                all_pairs &= (lag as f64 - tdoa).abs() <= 0.5 + 1e-9;
            }
        }
        good += all_pairs as usize;
    }
    check!(
        good * 100 >= 99 * 500,
        "{good}/500 directions within half a sample on every pair"
    );
    Ok(format!(
        "{good}/500 directions within half a sample on all 6 pairs"
    ))
}

// ---------------------------------------------------------------- 4

fn bits(v: &[u8]) -> Vec<bool> {
    v.iter().map(|&x| x == 1).collect()
}

fn metric_fixtures() -> Verdict {
    let e = |r: seld::Result<f64>| r.map_err(|e| e.to_string());

    // ER/F examples: one segment, three classes A B C
    let erf = sed_er_f(&bits(&[1, 1, 0]), &bits(&[1, 0, 1]), 3).map_err(|e| e.to_string())?;
    check!(erf.er == 0.5 && erf.f == 0.5, "ref AB pred AC gave {erf:?}");
    let erf = sed_er_f(&bits(&[1, 1, 1, 1]), &[false; 4], 2).map_err(|e| e.to_string())?;
    check!(erf.er == 1.0 && erf.f == 0.0, "deletions only gave {erf:?}");
    let erf = sed_er_f(&bits(&[1, 0, 0, 1]), &bits(&[1, 0, 0, 1]), 2).map_err(|e| e.to_string())?;
    check!(erf.er == 0.0 && erf.f == 1.0, "perfect gave {erf:?}");

    let ap = e(frame_map(&[0.9, 0.8, 0.7, 0.6], &bits(&[1, 0, 1, 0]), 1))?;
    check!((ap - 5.0 / 6.0).abs() < 1e-9, "AP {ap}");

    let d = doa_error(&[0.0, 0.0], &[true], &[(PI / 2.0) as f32, 0.0], &[true], 1)
        .map_err(|e| e.to_string())?;
    check!(
        d.mean_deg().is_some_and(|v| (v - 90.0).abs() < 1e-4),
        "orthogonal {:?}",
        d.mean_deg()
    );
    let d = doa_error(
        &[(PI - 1e-6) as f32, 0.0],
        &[true],
        &[(-PI + 1e-6) as f32, 0.0],
        &[true],
        1,
    )
    .map_err(|e| e.to_string())?;
    check!(
        d.mean_deg().is_some_and(|v| v < 1e-3),
        "wrap {:?}",
        d.mean_deg()
    );

    let fr = e(frame_recall(
        &bits(&[1, 0, 0, 0, 1, 1, 0, 0]),
        &bits(&[1, 0, 0, 1, 1, 1, 0, 0]),
        2,
    ))?;
    check!(fr == 0.75, "frame recall {fr}");

    // frozen ten-frame fixture, two classes, row-major [frame][class]
    let r = bits(&[1, 0, 1, 0, 1, 1, 0, 1, 0, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0]);
    let p = bits(&[1, 0, 1, 1, 0, 1, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 1]);
    let scores = [
        0.9, 0.1, 0.8, 0.6, 0.4, 0.7, 0.2, 0.9, 0.1, 0.3, 0.6, 0.2, 0.3, 0.4, 0.7, 0.45, 0.35,
        0.05, 0.05, 0.55,
    ];
    let pred_doa: [f32; 40] = [
        0.5, 0.0, 3.0, 1.0, 0.75, 0.0, 3.0, 1.0, 3.0, 1.0, 1.0, 0.0, 3.0, 1.0, 2.0, 0.0, 3.0, 1.0,
        3.0, 1.0, 3.0, 1.0, 3.0, 1.0, 3.0, 1.0, 3.0, 1.0, -0.25, 0.0, 3.0, 1.0, 3.0, 1.0, 3.0, 1.0,
        3.0, 1.0, 3.0, 1.0,
    ];
    let ref_doa: [f32; 40] = [
        0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, -2.0, 0.5, 1.0, 0.25, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.3, 0.25, 0.0, 1.5, -0.2, 1.0, 0.1, 0.0,
        0.0, 0.0, 0.0, 0.0, 0.0,
    ];
    let rs = segment_activity(&r, 2, 4).map_err(|e| e.to_string())?;
    let ps = segment_activity(&p, 2, 4).map_err(|e| e.to_string())?;
    let erf = sed_er_f(&rs, &ps, 2).map_err(|e| e.to_string())?;
    check!(
        erf.er == 2.0 / 5.0 && erf.f == 2.0 / 3.0,
        "fixture ER/F {erf:?}"
    );
    let map = e(frame_map(&scores, &r, 2))?;
    check!((map - 523.0 / 600.0).abs() < 1e-9, "fixture mAP {map}");
    let d = doa_error(&pred_doa, &p, &ref_doa, &r, 2).map_err(|e| e.to_string())?;
    let want = 0.2f64.to_degrees();
    check!(
        d.matched == 5 && d.mean_deg().is_some_and(|v| (v - want).abs() < 1e-9),
        "fixture DOA {:?} over {}",
        d.mean_deg(),
        d.matched
    );
    let fr = e(frame_recall(&p, &r, 2))?;
    check!(fr == 0.3, "fixture frame recall {fr}");
    Ok("ER/F, mAP, DOA error and frame recall fixtures exact".into())
}

// ---------------------------------------------------------------- 5

fn shape_chain() -> Verdict {
    let (n, c_in, f) = (3, 10, 64);
    let cfg = SeldConfig::desk(n, c_in);
    let c_out = *cfg.conv_channels.last().unwrap();
    let net = SeldNet::<f32>::new(cfg, BranchKind::Joint, 5).map_err(|e| e.to_string())?;
    for t in [208, 416] {
        let mut g = Graph::new();
        let bound = net.params().bind(&mut g, false);
        let x = g.leaf(
            Tensor::uniform(
                &[1, c_in, t, f],
                1.0,
                &mut ChaCha8Rng::seed_from_u64(t as u64),
            ),
            false,
        );
        let out = net
            .forward(&mut g, &bound, x, false)
            .map_err(|e| e.to_string())?;
        let stage = |name: &str| {
            out.trace
                .iter()
                .find(|(s, _)| s == name)
                .map(|(_, v)| v.clone())
        };
        let expect = [
            ("padded", vec![1, c_in, t, f]),
            ("group3", vec![1, c_out, t / 16, f / 16]),
            ("freq_pool", vec![1, c_out, t / 16]),
            ("sequence", vec![1, t / 16, c_out]),
            ("gru", vec![1, t / 16, c_out]),
            ("sed_head", vec![1, t / 16, n]),
            ("sed_upsampled", vec![1, t, n]),
            ("doa_head", vec![1, t / 16, 2 * n]),
        ];
        for (name, want) in expect {
            let got = stage(name);
            check!(
                got.as_ref() == Some(&want),
                "T={t} {name}: {got:?}, want {want:?}"
            );
        }
        check!(
            g.shape(out.sed.unwrap()) == [1, t, n],
            "T={t} sed output {:?}",
            g.shape(out.sed.unwrap())
        );
        check!(
            g.shape(out.doa.unwrap()) == [1, t, n, 2],
            "T={t} doa output {:?}",
            g.shape(out.doa.unwrap())
        );
    }
    Ok(format!("C x T x F -> {c_out} x T/16 x F/16 -> T/16 x {c_out} -> T/16 x N -> T x N for T = 208, 416"))
}

// ---------------------------------------------------------------- 6-8

fn seld(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_seld"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "seld {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn scratch(name: &str) -> PathBuf {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).unwrap();
    root
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--epochs",
    "2",
    "--batch-size",
    "4",
    "--conv-channels",
    "4,4,8,8",
    "--n-mels",
    "16",
];

fn reproducible() -> Verdict {
    let (a, b) = (scratch("repro-a"), scratch("repro-b"));
    for root in [&a, &b] {
        let mut args = vec![
            "pipeline",
            "--out",
            s(root),
            "--workers",
            "1",
            "--clips",
            "6",
            "--duration",
            "3",
        ];
        args.extend(["--classes", "3", "--seed", "7", "--val-fraction", "0.34"]);
        args.extend_from_slice(TINY);
        seld(&args)?;
    }
    let run = Path::new("runs/two_stage-foa-s7");
    let mut compared = 0;
    for entry in fs::read_dir(a.join(run)).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("ckpt_") || name == "metrics.csv" {
            let x = fs::read(a.join(run).join(&*name)).map_err(|e| e.to_string())?;
            let y = fs::read(b.join(run).join(&*name)).map_err(|e| e.to_string())?;
            check!(x == y, "{name} differs");
            compared += 1;
        }
    }
    check!(compared >= 5, "only {compared} artifacts found");
    Ok(format!(
        "{compared} checkpoint and metrics files identical across two runs"
    ))
}

const DESK: &[&str] = &["--preset", "desk", "--epochs", "50"];
const FULL_CLIPS: usize = 200;

fn all_row(run: &Path, file: &str) -> Result<MetricsRow, String> {
    read_metrics_csv(&run.join(file))
        .map_err(|e| e.to_string())?
        .into_iter()
        .find(|r| r.id == "all")
        .ok_or_else(|| format!("{} has no pooled row", run.display()))
}

fn desk_dataset(root: &Path) -> Result<(), String> {
    let n = FULL_CLIPS.to_string();
    seld(&[
        "synth",
        "--out",
        s(root),
        "--clips",
        &n,
        "--duration",
        "10",
        "--classes",
        "3",
        "--seed",
        "0",
    ])
    .map(drop)
}

/// Trains, infers and scores one regime. Returns the run directory and the elapsed time.
fn train_eval(
    root: &Path,
    regime: &str,
    seed: u64,
    extra: &[&str],
) -> Result<(PathBuf, Duration), String> {
    let start = Instant::now();
    let seed = seed.to_string();
    let id = format!("{}-s{seed}", regime.replace('-', "_"));
    let mut args = vec![
        "train",
        "--out",
        s(root),
        "--regime",
        regime,
        "--seed",
        &seed,
        "--run-id",
        &id,
    ];
    args.extend_from_slice(DESK);
    if regime == "doa-transfer" {
        args.extend_from_slice(extra);
    }
    seld(&args)?;
    let mut infer = vec!["infer", "--out", s(root), "--run-id", &id];
    if regime == "doa-nt" {
        infer.extend_from_slice(extra);
    }
    seld(&infer)?;
    seld(&["eval", "--out", s(root), "--run-id", &id])?;
    Ok((root.join("runs").join(&id), start.elapsed()))
}

fn end_to_end() -> Verdict {
    let root = scratch("desk");
    let start = Instant::now();
    desk_dataset(&root)?;
    let synth = start.elapsed();
    let mut good = 0;
    let mut lines = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in 0..3 {
        let (run, took) = train_eval(&root, "two-stage", seed, &[])?;
        let m = all_row(&run, "metrics.csv")?;
        let doa = m.doa_deg.unwrap_or(f64::INFINITY);
        good += (m.f >= 0.80 && doa <= 15.0) as usize;
        slowest = slowest.max(took + synth);
        lines.push(format!(
            "seed {seed}: F {:.3} DOA {doa:.1} deg in {:.1} min",
            m.f,
            took.as_secs_f64() / 60.0
        ));
    }
    let summary = lines.join("; ");
    check!(
        good >= 2,
        "{good}/3 seeds meet F >= 0.80 and DOA <= 15 deg ({summary})"
    );
    check!(
        slowest <= Duration::from_secs(45 * 60),
        "slowest run {:.1} min > 45 ({summary})",
        slowest.as_secs_f64() / 60.0
    );
    Ok(summary)
}

/// Times one epoch of each stage on a small slice of the desk task and scales it up.
fn projection() -> Line {
    let r = (|| -> Result<f64, String> {
        let root = scratch("projection");
        let start = Instant::now();
        seld(&[
            "synth",
            "--out",
            s(&root),
            "--clips",
            "10",
            "--duration",
            "10",
            "--classes",
            "3",
            "--seed",
            "0",
        ])?;
        seld(&["features", "--out", s(&root)])?;
        let prep = start.elapsed();
        let start = Instant::now();
        seld(&[
            "train",
            "--out",
            s(&root),
            "--regime",
            "two-stage",
            "--preset",
            "desk",
            "--epochs",
            "1",
        ])?;
        let one_epoch_each = start.elapsed().as_secs_f64();
        // 8 of the 10 clips train; the full task trains 160 for 50 epochs per stage
        let scale = (FULL_CLIPS as f64 * 0.8) / 8.0;
        Ok((one_epoch_each * 50.0 * scale + prep.as_secs_f64() * FULL_CLIPS as f64 / 10.0) / 60.0)
    })();
    match r {
        Ok(min) => Line::Skipped(format!(
            "not evaluated: projected {min:.0} min per two-stage run on this host exceeds the 45 min budget \
             (set SELD_ACCEPT_FULL=1 to run all three seeds)"
        )),
        Err(e) => Line::Fail(format!("runtime projection failed: {e}")),
    }
}

/// First 1-indexed epoch whose training loss is at or below `target`.
fn epochs_to_reach(history: &[HistoryRow], stage: &str, target: f64) -> Option<usize> {
    history
        .iter()
        .filter(|h| h.stage == stage)
        .position(|h| h.train_loss <= target)
        .map(|i| i + 1)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn orderings() -> Verdict {
    let root = scratch("orderings");
    desk_dataset(&root)?;
    let (mut dt, mut nt, mut ts_f, mut jt_f, mut ts_doa, mut jt_doa) =
        (vec![], vec![], vec![], vec![], vec![], vec![]);
    let (mut faster_dt, mut faster_nt) = (vec![], vec![]);
    for seed in 0..3u64 {
        let (two, _) = train_eval(&root, "two-stage", seed, &[])?;
        let sed_ckpt = two.join("ckpt_sed");
        let flag = ["--sed-checkpoint", s(&sed_ckpt)];
        let (nt_run, _) = train_eval(&root, "doa-nt", seed, &flag)?;
        let (joint, _) = train_eval(&root, "joint", seed, &[])?;

        // the second stage of two_stage is the doa_transfer regime
        let m2 = all_row(&two, "metrics.csv")?;
        let mn = all_row(&nt_run, "metrics.csv")?;
        let mj = all_row(&joint, "metrics.csv")?;
        dt.push(m2.doa_deg.unwrap_or(180.0));
        nt.push(mn.doa_deg.unwrap_or(180.0));
        ts_f.push(m2.f);
        jt_f.push(mj.f);
        ts_doa.push(m2.doa_deg.unwrap_or(180.0));
        jt_doa.push(mj.doa_deg.unwrap_or(180.0));

        let h2 = read_history_csv(&two.join("history.csv")).map_err(|e| e.to_string())?;
        let hn = read_history_csv(&nt_run.join("history.csv")).map_err(|e| e.to_string())?;
        let target = hn
            .iter()
            .filter(|h| h.stage == "doa")
            .last()
            .map(|h| h.train_loss)
            .ok_or("empty doa_nt history")?;
        faster_dt.push(epochs_to_reach(&h2, "doa", target).map_or(f64::INFINITY, |e| e as f64));
        faster_nt.push(epochs_to_reach(&hn, "doa", target).map_or(f64::INFINITY, |e| e as f64));
    }
    let (dt, nt, tf, jf, td, jd) = (
        median(dt),
        median(nt),
        median(ts_f),
        median(jt_f),
        median(ts_doa),
        median(jt_doa),
    );
    let (ed, en) = (median(faster_dt), median(faster_nt));
    let summary = format!(
        "transfer DOA {dt:.1} vs nt {nt:.1}; epochs to nt final loss {ed} vs {en}; \
         two_stage F {tf:.3} DOA {td:.1} vs joint F {jf:.3} DOA {jd:.1}"
    );
    check!(dt <= nt && ed < en, "(a) fails: {summary}");
    check!(tf >= jf && td <= jd, "(b) fails: {summary}");
    Ok(summary)
}
