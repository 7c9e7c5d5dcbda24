//! Plane-wave rendering into FOA and into an omnidirectional microphone array.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{sh_vector, DoaAngle};
use crate::dsp::{Waveform, SPEED_OF_SOUND};
use crate::error::{ensure, Result};

/// Largest delay (samples) the frequency-domain renderer accepts.
pub const DELAY_GUARD: usize = 256;

/// Largest pairwise distance (m) of the default tetrahedral array.
pub const DEFAULT_D_MAX: f64 = 0.0482;

/// A mono plane wave arriving from a fixed direction.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneWaveSource {
    pub signal: Vec<f32>,
    pub doa: DoaAngle,
    /// Seconds from the start of the clip.
    pub onset: f64,
    pub class_id: usize,
}

/// Array-centered microphone positions in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicArrayGeometry {
    pub positions: Vec<[f64; 3]>,
    /// Speed of sound, m/s.
    pub c: f64,
}

impl MicArrayGeometry {
    pub fn new(positions: Vec<[f64; 3]>, c: f64) -> Result<Self> {
        ensure!(
            positions.len() >= 2,
            InvalidArgument,
            "array needs at least two microphones"
        );
        ensure!(c > 0.0, InvalidArgument, "speed of sound must be positive");
        Ok(Self { positions, c })
    }

    /// Four capsules on alternating cube vertices, scaled so every pair is `d_max` apart.
    pub fn tetrahedral(d_max: f64) -> Self {
        let s = d_max / (2.0 * std::f64::consts::SQRT_2);
        let positions = [
            [1.0, 1.0, 1.0],
            [1.0, -1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
        ]
        .iter()
        .map(|p: &[f64; 3]| [p[0] * s, p[1] * s, p[2] * s])
        .collect();
        Self {
            positions,
            c: SPEED_OF_SOUND,
        }
    }

    pub fn n_mics(&self) -> usize {
        self.positions.len()
    }

    pub fn max_distance(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (k, p) in self.positions.iter().enumerate() {
            for q in &self.positions[k + 1..] {
                d = d.max(dist(p, q));
            }
        }
        d
    }

    /// Arrival time offset (s) of a plane wave from `doa` at mic `m`, relative to the array center.
    pub fn arrival_delay(&self, doa: &DoaAngle, m: usize) -> f64 {
        -dot(&doa.unit_vector(), &self.positions[m]) / self.c
    }
}

impl Default for MicArrayGeometry {
    fn default() -> Self {
        Self::tetrahedral(DEFAULT_D_MAX)
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn clip_len(duration: f64, fs: u32) -> Result<usize> {
    ensure!(duration > 0.0, InvalidArgument, "duration must be positive");
    Ok((duration * fs as f64).round() as usize)
}

fn placement(src: &PlaneWaveSource, len: usize, fs: u32) -> Result<usize> {
    ensure!(
        src.onset >= 0.0,
        InvalidArgument,
        "negative onset {}",
        src.onset
    );
    let start = (src.onset * fs as f64).round() as usize;
    ensure!(
        start + src.signal.len() <= len,
        InvalidArgument,
        "source at {:.3}s with {} samples overruns a {len}-sample clip",
        src.onset,
        src.signal.len()
    );
    Ok(start)
}

/// First-order ambisonic encoding `b(t) = sum_n y_n s_n(t)`, four channels in ACN order.
pub fn encode_foa(sources: &[PlaneWaveSource], duration: f64, fs: u32) -> Result<Waveform> {
    let len = clip_len(duration, fs)?;
    let mut out = vec![vec![0.0f32; len]; 4];
    for src in sources {
        let start = placement(src, len, fs)?;
        let y = sh_vector(src.doa, 1)?;
        for (ch, gain) in out.iter_mut().zip(&y) {
            let g = *gain as f32;
            for (o, &s) in ch[start..start + src.signal.len()]
                .iter_mut()
                .zip(&src.signal)
            {
                *o += g * s;
            }
        }
    }
    Waveform::new(out, fs)
}

/// Free-field simulation: mic `m` receives `sum_n s_n(t - tau_nm)` with
/// `tau_nm = -(u_n . p_m) / c`, applied as a phase ramp over the whole clip.
pub fn simulate_mic_array(
    sources: &[PlaneWaveSource],
    geom: &MicArrayGeometry,
    duration: f64,
    fs: u32,
) -> Result<Waveform> {
    let len = clip_len(duration, fs)?;
    let n = (len + 2 * DELAY_GUARD).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);

    let mut acc = vec![vec![Complex64::new(0.0, 0.0); n]; geom.n_mics()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for src in sources {
        let start = placement(src, len, fs)?;
        let delays: Vec<f64> = (0..geom.n_mics())
            .map(|m| geom.arrival_delay(&src.doa, m))
            .collect();
        for &tau in &delays {
            ensure!(
                (tau * fs as f64).abs() <= DELAY_GUARD as f64,
                InvalidArgument,
                "delay of {:.1} samples exceeds the {DELAY_GUARD}-sample guard",
                tau * fs as f64
            );
        }
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (b, &s) in buf[start..].iter_mut().zip(&src.signal) {
            b.re = s as f64;
        }
        fft.process(&mut buf);
        for (spec, &tau) in acc.iter_mut().zip(&delays) {
            let phase = |k: usize| -2.0 * std::f64::consts::PI * signed_bin_freq(k, n, fs) * tau;
            let step = Complex64::from_polar(1.0, phase(1));
            let mut ramp = Complex64::new(1.0, 0.0);
            for (k, (a, x)) in spec.iter_mut().zip(&buf).enumerate() {
                // exact phase at block starts and at the wrap to negative frequencies
                if k % 512 == 0 || k == n / 2 + 1 {
                    ramp = Complex64::from_polar(1.0, phase(k));
                }
                *a += x * ramp;
                ramp *= step;
            }
        }
    }

    let scale = 1.0 / n as f64;
    let channels = acc
        .into_iter()
        .map(|mut spec| {
            ifft.process(&mut spec);
            spec[..len].iter().map(|c| (c.re * scale) as f32).collect()
        })
        .collect();
    Waveform::new(channels, fs)
}

fn signed_bin_freq(k: usize, n: usize, fs: u32) -> f64 {
    let k = if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    };
    k * fs as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{gcc_phat, stft};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(seed: u64, n: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                0.1 * v as f32
            })
            .collect()
    }

    fn source(signal: Vec<f32>, az: f64, el: f64, onset: f64) -> PlaneWaveSource {
        PlaneWaveSource {
            signal,
            doa: DoaAngle::new(az, el).unwrap(),
            onset,
            class_id: 0,
        }
    }

    #[test]
    fn tetrahedron_has_equal_edges() {
        let g = MicArrayGeometry::default();
        assert!((g.max_distance() - 0.0482).abs() < 1e-12);
        for i in 0..4 {
            for j in i + 1..4 {
                assert!((dist(&g.positions[i], &g.positions[j]) - 0.0482).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frontal_source_encodes_into_w_and_x() {
        let s = noise(1, 3200);
        let w = encode_foa(&[source(s.clone(), 0.0, 0.0, 0.0)], 0.1, 32000).unwrap();
        assert_eq!(w.channel(0), &s[..]);
        assert_eq!(w.channel(3), &s[..]);
        assert!(w.channel(1).iter().all(|&v| v.abs() < 1e-7 * 10.0));
        assert!(w.channel(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_superposes_and_scales() {
        let a = source(noise(2, 1600), 0.5, 0.2, 0.01);
        let b = source(noise(3, 1600), -2.0, -0.4, 0.03);
        let both = encode_foa(&[a.clone(), b.clone()], 0.1, 32000).unwrap();
        let wa = encode_foa(&[a.clone()], 0.1, 32000).unwrap();
        let wb = encode_foa(&[b], 0.1, 32000).unwrap();
        for ch in 0..4 {
            for k in 0..3200 {
                let sum = wa.channel(ch)[k] + wb.channel(ch)[k];
                assert!((both.channel(ch)[k] - sum).abs() < 1e-6);
            }
        }
        let doubled = source(a.signal.iter().map(|v| v * 2.0).collect(), 0.5, 0.2, 0.01);
        let w2 = encode_foa(&[doubled], 0.1, 32000).unwrap();
        for ch in 0..4 {
            for k in 0..3200 {
                assert_eq!(w2.channel(ch)[k], 2.0 * wa.channel(ch)[k]);
            }
        }
    }

    #[test]
    fn overrunning_source_is_rejected() {
        let s = source(noise(4, 3200), 0.0, 0.0, 0.05);
        assert!(encode_foa(&[s.clone()], 0.1, 32000).is_err());
        assert!(simulate_mic_array(&[s], &MicArrayGeometry::default(), 0.1, 32000).is_err());
    }

    #[test]
    fn silent_sources_give_silence() {
        let s = source(vec![0.0; 1000], 1.0, 0.3, 0.0);
        let w = simulate_mic_array(&[s], &MicArrayGeometry::default(), 0.1, 32000).unwrap();
        assert!(w.channels().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn integer_delay_matches_shift() {
        // a two-mic line array with spacing chosen for exactly 2 samples of delay
        let fs = 32000;
        let spacing = 2.0 * 343.0 / fs as f64;
        let geom = MicArrayGeometry::new(
            vec![[spacing / 2.0, 0.0, 0.0], [-spacing / 2.0, 0.0, 0.0]],
            343.0,
        )
        .unwrap();
        let sig = noise(5, 2000);
        let w = simulate_mic_array(&[source(sig.clone(), 0.0, 0.0, 0.01)], &geom, 0.1, fs).unwrap();
        let start = 320;
        // mic 0 leads the center by 1 sample, mic 1 lags by 1
        for k in 10..1990 {
            assert!((w.channel(0)[start + k - 1] - sig[k]).abs() < 1e-4);
            assert!((w.channel(1)[start + k + 1] - sig[k]).abs() < 1e-4);
        }
    }

    #[test]
    fn symmetric_source_has_zero_tdoa() {
        let geom = MicArrayGeometry::default();
        let (p0, p1) = (geom.positions[0], geom.positions[1]);
        // direction perpendicular to p1 - p0 in the bisecting plane: (p0 + p1) normalized
        let mid = [p0[0] + p1[0], p0[1] + p1[1], p0[2] + p1[2]];
        let norm = (mid[0] * mid[0] + mid[1] * mid[1] + mid[2] * mid[2]).sqrt();
        let az = mid[1].atan2(mid[0]);
        let el = (mid[2] / norm).asin();
        let sig = noise(6, 16000);
        let w = simulate_mic_array(&[source(sig, az, el, 0.0)], &geom, 0.5, 32000).unwrap();
        let g = gcc_phat(&stft(&w, 1024, 320).unwrap(), 0, 1, 64).unwrap();
        let frame = &g[64 * 20..64 * 21];
        let peak = (0..64)
            .max_by(|&a, &b| frame[a].total_cmp(&frame[b]))
            .unwrap();
        assert_eq!(peak, 32);
    }

    #[test]
    fn gcc_peak_tracks_geometric_tdoa() {
        let geom = MicArrayGeometry::default();
        let fs = 32000.0;
        for (k, (az, el)) in [(0.3, 0.1), (-2.0, -0.5), (1.4, 0.6)]
            .into_iter()
            .enumerate()
        {
            let d = DoaAngle::new(az, el).unwrap();
            let u = d.unit_vector();
            let w = simulate_mic_array(
                &[source(noise(10 + k as u64, 16000), az, el, 0.0)],
                &geom,
                0.5,
                32000,
            )
            .unwrap();
            let spec = stft(&w, 1024, 320).unwrap();
            for (i, j) in [(0, 1), (1, 3)] {
                // j lags i by tau_j - tau_i = u . (p_i - p_j) / c
                let dp: Vec<f64> = (0..3)
                    .map(|x| geom.positions[i][x] - geom.positions[j][x])
                    .collect();
                let tdoa = (u[0] * dp[0] + u[1] * dp[1] + u[2] * dp[2]) / geom.c * fs;
                let g = gcc_phat(&spec, i, j, 64).unwrap();
                let frame = &g[64 * 20..64 * 21];
                let peak = (0..64)
                    .max_by(|&a, &b| frame[a].total_cmp(&frame[b]))
                    .unwrap() as f64
                    - 32.0;
                assert!(
                    (peak - tdoa).abs() <= 0.5 + 1e-9,
                    "pair ({i},{j}) peak {peak} tdoa {tdoa}"
                );
            }
        }
    }
}
