use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{ensure, Result};

/// Per-channel STFT, laid out channel-major, then frame, then frequency bin.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    bins: Vec<Complex64>,
    n_channels: usize,
    n_frames: usize,
    fft_size: usize,
    hop: usize,
    sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Spectrum of one frame of one channel.
    pub fn frame(&self, channel: usize, t: usize) -> &[Complex64] {
        let nb = self.freq_bins();
        let start = (channel * self.n_frames + t) * nb;
        &self.bins[start..start + nb]
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Hann-windowed, centered STFT.
///
/// Each channel is padded by `fft_size / 2` reflected samples on both sides and
/// exactly `len / hop` frames are kept, so frame `t` is centered on sample `t * hop`.
pub fn stft(w: &Waveform, fft_size: usize, hop: usize) -> Result<ComplexSpectrogram> {
    ensure!(hop > 0, InvalidArgument, "hop must be positive");
    ensure!(
        fft_size.is_power_of_two() && fft_size >= 2,
        InvalidArgument,
        "fft size {fft_size} is not a power of two"
    );
    ensure!(
        hop <= fft_size,
        InvalidArgument,
        "hop {hop} exceeds fft size {fft_size}"
    );
    let len = w.len();
    let half = fft_size / 2;
    ensure!(
        len > half,
        InvalidArgument,
        "signal of {len} samples too short to reflect-pad for fft size {fft_size}"
    );
    let n_frames = len / hop;
    ensure!(n_frames > 0, InvalidArgument, "signal shorter than one hop");

    let window = hann_window(fft_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let nb = half + 1;
    let mut bins = Vec::with_capacity(w.n_channels() * n_frames * nb);
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    for ch in w.channels() {
        let padded = reflect_pad(ch, half);
        for t in 0..n_frames {
            let start = t * hop;
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = Complex64::new(padded[start + k] as f64 * window[k], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            bins.extend_from_slice(&buf[..nb]);
        }
    }

    Ok(ComplexSpectrogram {
        bins,
        n_channels: w.n_channels(),
        n_frames,
        fft_size,
        hop,
        sample_rate: w.sample_rate(),
    })
}

fn reflect_pad(x: &[f32], pad: usize) -> Vec<f32> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((1..=pad).map(|i| x[n - 1 - i]));
    out
}
