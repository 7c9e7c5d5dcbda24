//! Synthetic sound-event bank: one deterministic signal template per class.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{ensure, Result};

/// Number of templates in the bank.
pub const MAX_CLASSES: usize = 11;

/// RMS of a generated event before scene gain is applied.
pub const EVENT_RMS: f64 = 0.1;

const RAMP_SECS: f64 = 0.01;

#[derive(Debug, Clone, Copy)]
struct Template {
    name: &'static str,
    carrier_hz: f64,
    noise_mix: f64,
    am_rate_hz: f64,
    am_depth: f64,
}

const fn template(
    name: &'static str,
    carrier_hz: f64,
    noise_mix: f64,
    am_rate_hz: f64,
    am_depth: f64,
) -> Template {
    Template {
        name,
        carrier_hz,
        noise_mix,
        am_rate_hz,
        am_depth,
    }
}

// carriers step by a factor of 1.45 so neighboring centroids sit more than one Bark apart
const BANK: [Template; MAX_CLASSES] = [
    template("hum", 250.0, 0.1, 2.0, 0.3),
    template("horn", 362.5, 0.3, 5.5, 0.6),
    template("knock", 525.6, 0.6, 9.0, 0.9),
    template("bell", 762.2, 0.0, 1.0, 0.2),
    template("voice", 1105.2, 0.4, 4.0, 0.7),
    template("engine", 1602.5, 0.7, 12.0, 0.5),
    template("chirp", 2323.6, 0.2, 7.0, 0.8),
    template("drawer", 3369.3, 0.8, 3.0, 0.4),
    template("beep", 4885.5, 0.0, 6.0, 0.9),
    template("keys", 7084.0, 0.9, 15.0, 0.6),
    template("hiss", 10271.8, 1.0, 0.5, 0.2),
];

/// Human-readable class names for the first `n` classes.
pub fn class_names(n: usize) -> Vec<String> {
    BANK.iter().take(n).map(|t| t.name.to_string()).collect()
}

/// Nominal carrier frequency of a class (Hz).
pub fn class_carrier_hz(class_id: usize) -> Option<f64> {
    BANK.get(class_id).map(|t| t.carrier_hz)
}

/// Generates one event of `class_id` lasting `duration` seconds.
///
/// A tone and a band of random-phase partials around the class
/// carrier are mixed in class-specific proportion, amplitude-modulated, given
/// 10 ms linear ramps and normalized to [`EVENT_RMS`].
pub fn synth_event_signal<R: Rng>(
    class_id: usize,
    duration: f64,
    fs: u32,
    rng: &mut R,
) -> Result<Vec<f32>> {
    ensure!(
        class_id < MAX_CLASSES,
        InvalidArgument,
        "class {class_id} outside the {MAX_CLASSES}-class bank"
    );
    ensure!(
        duration > 0.0,
        InvalidArgument,
        "event duration must be positive"
    );
    let tpl = BANK[class_id];
    let n = (duration * fs as f64).round() as usize;
    let fs = fs as f64;

    let f0 = tpl.carrier_hz * rng.gen_range(0.98..1.02);
    let tone_phase = rng.gen_range(0.0..2.0 * PI);
    let partials: Vec<(f64, f64)> = (0..24)
        .map(|_| (f0 * rng.gen_range(0.8..1.25), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let am_phase = rng.gen_range(0.0..2.0 * PI);

    let mut tone = vec![0.0f64; n];
    let mut band = vec![0.0f64; n];
    for k in 0..n {
        let t = k as f64 / fs;
        tone[k] = (2.0 * PI * f0 * t + tone_phase).sin();
        band[k] = partials
            .iter()
            .map(|&(f, ph)| (2.0 * PI * f * t + ph).sin())
            .sum();
    }
    let (tone_rms, band_rms) = (rms(&tone), rms(&band));

    let ramp = (RAMP_SECS * fs).round().max(1.0);
    let mut out: Vec<f64> = (0..n)
        .map(|k| {
            let t = k as f64 / fs;
            let mix = (1.0 - tpl.noise_mix) * tone[k] / tone_rms.max(1e-12)
                + tpl.noise_mix * band[k] / band_rms.max(1e-12);
            let am = 1.0 - tpl.am_depth / 2.0
                + tpl.am_depth / 2.0 * (2.0 * PI * tpl.am_rate_hz * t + am_phase).sin();
            let env = (k as f64 / ramp).min((n - 1 - k) as f64 / ramp).min(1.0);
            mix * am * env
        })
        .collect();
    let r = rms(&out);
    if r > 0.0 {
        out.iter_mut().for_each(|v| *v *= EVENT_RMS / r);
    }
    Ok(out.into_iter().map(|v| v as f32).collect())
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}
