use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::ComplexSpectrogram;
use crate::error::{ensure, Result};

/// Floor on the whitening denominator; only near-empty bins ever reach it.
pub const WHITEN_EPS: f64 = 1e-8;

/// Default speed of sound (m/s) for the maximum-lag estimate.
pub const SPEED_OF_SOUND: f64 = 343.0;

/// GCC-PHAT between channels `i` and `j`, one lag vector per frame (`frames x n_lags`).
///
/// Lags run from `-n_lags/2` to `n_lags/2 - 1`, lag zero sits at index `n_lags/2`.
/// A positive lag means channel `j` is a delayed copy of channel `i`.
pub fn gcc_phat(s: &ComplexSpectrogram, i: usize, j: usize, n_lags: usize) -> Result<Vec<f32>> {
    let n_ch = s.n_channels();
    ensure!(
        i < n_ch && j < n_ch,
        InvalidArgument,
        "channel pair ({i},{j}) out of range for {n_ch} channels"
    );
    ensure!(
        i != j,
        InvalidArgument,
        "gcc-phat needs two distinct channels"
    );
    let n = s.fft_size();
    ensure!(
        n_lags > 0 && n_lags % 2 == 0 && n_lags <= n,
        InvalidArgument,
        "lag count {n_lags} must be even and at most {n}"
    );

    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    let half_lags = n_lags as isize / 2;
    let mut out = Vec::with_capacity(s.n_frames() * n_lags);

    for t in 0..s.n_frames() {
        let (xi, xj) = (s.frame(i, t), s.frame(j, t));
        for (k, (a, b)) in xi.iter().zip(xj).enumerate() {
            full[k] = a * b.conj() / (a.norm() * b.norm()).max(WHITEN_EPS);
        }
        for k in n / 2 + 1..n {
            full[k] = full[n - k].conj();
        }
        ifft.process_with_scratch(&mut full, &mut scratch);
        // the inverse transform peaks at -delay; read it mirrored so delay maps to +lag
        for lag in -half_lags..half_lags {
            let idx = (-lag).rem_euclid(n as isize) as usize;
            out.push((full[idx].re / n as f64) as f32);
        }
    }
    Ok(out)
}

/// Largest physically possible inter-microphone delay in samples, `d_max * fs / c`.
pub fn max_lag_samples(d_max: f64, c: f64, fs: f64) -> Result<f64> {
    ensure!(
        d_max > 0.0 && c > 0.0 && fs > 0.0,
        InvalidArgument,
        "d_max, c and fs must all be positive"
    );
    Ok(d_max * fs / c)
}

/// Smallest lag-axis length that holds every delay up to `max_lag` in both directions.
pub fn min_lag_count(max_lag: f64) -> usize {
    2 * max_lag.ceil() as usize + 1
}
