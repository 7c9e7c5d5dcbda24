use super::ComplexSpectrogram;
use crate::error::{ensure, Result};

/// Floor added before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with centers equally spaced on the mel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    weights: Vec<f64>,
    n_mels: usize,
    fft_size: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
}

impl MelFilterbank {
    pub fn new(
        n_mels: usize,
        fft_size: usize,
        sample_rate: u32,
        fmin: f64,
        fmax: f64,
    ) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        ensure!(n_mels >= 1, InvalidArgument, "need at least one mel band");
        ensure!(
            0.0 <= fmin && fmin < fmax && fmax <= nyquist,
            InvalidArgument,
            "need 0 <= fmin < fmax <= {nyquist}, got fmin={fmin} fmax={fmax}"
        );
        let n_bins = fft_size / 2 + 1;
        ensure!(
            n_mels <= n_bins,
            InvalidArgument,
            "{n_mels} mel bands exceed {n_bins} frequency bins"
        );

        let (mel_lo, mel_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;

        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let up = (f - lo) / (center - lo);
                let down = (hi - f) / (hi - center);
                *w = up.min(down).max(0.0);
            }
            // a band narrower than the bin spacing still gets its nearest bin
            if row.iter().all(|&w| w == 0.0) {
                let k = ((center / bin_hz).round() as usize).min(n_bins - 1);
                row[k] = 1.0;
            }
        }

        Ok(Self {
            weights,
            n_mels,
            fft_size,
            sample_rate,
            fmin,
            fmax,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn fmin(&self) -> f64 {
        self.fmin
    }

    pub fn fmax(&self) -> f64 {
        self.fmax
    }

    pub fn row(&self, m: usize) -> &[f64] {
        let nb = self.n_bins();
        &self.weights[m * nb..(m + 1) * nb]
    }

    /// Indices of the first and last nonzero weight of band `m`.
    pub fn support(&self, m: usize) -> (usize, usize) {
        let row = self.row(m);
        let first = row.iter().position(|&w| w > 0.0).unwrap_or(0);
        let last = row.iter().rposition(|&w| w > 0.0).unwrap_or(0);
        (first, last)
    }
}

/// Natural-log mel power per channel: `channels x frames x n_mels`, row-major.
pub fn log_mel(s: &ComplexSpectrogram, fb: &MelFilterbank) -> Result<Vec<Vec<f32>>> {
    ensure!(
        fb.fft_size() == s.fft_size() && fb.sample_rate() == s.sample_rate(),
        InvalidArgument,
        "filterbank built for fft {} @ {} Hz, spectrogram is fft {} @ {} Hz",
        fb.fft_size(),
        fb.sample_rate(),
        s.fft_size(),
        s.sample_rate()
    );
    let n_mels = fb.n_mels();
    let mut out = Vec::with_capacity(s.n_channels());
    let mut power = vec![0.0; s.freq_bins()];
    for ch in 0..s.n_channels() {
        let mut map = Vec::with_capacity(s.n_frames() * n_mels);
        for t in 0..s.n_frames() {
            for (p, c) in power.iter_mut().zip(s.frame(ch, t)) {
                *p = c.norm_sqr();
            }
            for m in 0..n_mels {
                let e: f64 = fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
                map.push((e + LOG_FLOOR).ln() as f32);
            }
        }
        out.push(map);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, Waveform};

    #[test]
    fn single_filter_spans_band_and_peaks_mid_mel() {
        let fb = MelFilterbank::new(1, 1024, 32000, 0.0, 16000.0).unwrap();
        let (first, last) = fb.support(0);
        assert!(first <= 1);
        assert!(last >= 511);
        let mid_hz = mel_to_hz(hz_to_mel(16000.0) / 2.0);
        let row = fb.row(0);
        let peak = (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .unwrap();
        assert!((peak as f64 * 31.25 - mid_hz).abs() <= 31.25);
    }

    #[test]
    fn default_bank_covers_passband() {
        let fb = MelFilterbank::new(64, 1024, 32000, 50.0, 14000.0).unwrap();
        assert_eq!(fb.n_bins(), 513);
        for m in 0..64 {
            assert!(fb.row(m).iter().any(|&w| w > 0.0), "band {m} empty");
            assert!(fb.row(m).iter().all(|&w| w >= 0.0));
        }
        for k in 0..513 {
            let f = k as f64 * 31.25;
            if f > 50.0 && f < 14000.0 {
                assert!(
                    (0..64).any(|m| fb.row(m)[k] > 0.0),
                    "bin {k} ({f} Hz) uncovered"
                );
            }
        }
    }

    #[test]
    fn supports_sorted_and_overlapping() {
        let fb = MelFilterbank::new(64, 1024, 32000, 50.0, 14000.0).unwrap();
        for m in 1..64 {
            let (a0, a1) = fb.support(m - 1);
            let (b0, b1) = fb.support(m);
            assert!(a0 <= b0 && a1 <= b1);
            if m > 8 {
                // wide enough to span several bins: neighbors share support
                assert!(b0 <= a1, "bands {} and {m} do not overlap", m - 1);
            }
        }
    }

    #[test]
    fn rejects_invalid() {
        assert!(MelFilterbank::new(600, 1024, 32000, 0.0, 16000.0).is_err());
        assert!(MelFilterbank::new(64, 1024, 32000, 100.0, 50.0).is_err());
        assert!(MelFilterbank::new(64, 1024, 32000, 0.0, 17000.0).is_err());
        assert!(MelFilterbank::new(0, 1024, 32000, 0.0, 16000.0).is_err());
    }

    #[test]
    fn zero_input_hits_log_floor() {
        let w = Waveform::silence(4, 64000, 32000).unwrap();
        let s = stft(&w, 1024, 320).unwrap();
        let fb = MelFilterbank::new(64, 1024, 32000, 50.0, 14000.0).unwrap();
        let maps = log_mel(&s, &fb).unwrap();
        assert_eq!(maps.len(), 4);
        assert_eq!(maps[0].len(), 200 * 64);
        let floor = (1e-10f64).ln() as f32;
        assert!((floor + 23.02585).abs() < 1e-4);
        assert!(maps.iter().flatten().all(|&v| v == floor));
    }

    #[test]
    fn doubling_amplitude_adds_ln4() {
        let x: Vec<f32> = (0..16000)
            .map(|i| 0.3 * (2.0 * std::f32::consts::PI * 440.0 * i as f32 / 32000.0).sin())
            .collect();
        let w = Waveform::new(vec![x], 32000).unwrap();
        let fb = MelFilterbank::new(64, 1024, 32000, 50.0, 14000.0).unwrap();
        let a = log_mel(&stft(&w, 1024, 320).unwrap(), &fb).unwrap();
        let b = log_mel(&stft(&w.scaled(2.0), 1024, 320).unwrap(), &fb).unwrap();
        let ln4 = 4f32.ln();
        let mut checked = 0;
        for (p, q) in a[0].iter().zip(&b[0]) {
            if *p > -10.0 {
                assert!((q - p - ln4).abs() < 1e-3, "{p} -> {q}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn rejects_mismatched_filterbank() {
        let w = Waveform::silence(1, 8000, 32000).unwrap();
        let s = stft(&w, 512, 320).unwrap();
        let fb = MelFilterbank::new(64, 1024, 32000, 50.0, 14000.0).unwrap();
        assert!(log_mel(&s, &fb).is_err());
    }
}
