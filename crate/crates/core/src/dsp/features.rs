use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{gcc_phat, log_mel, stft, MelFilterbank, Waveform};
use crate::error::{ensure, Result};

/// What one input map of a [`FeatureTensor`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelRole {
    LogMel { mic: usize },
    Gcc { i: usize, j: usize },
}

/// Stacked `channels x frames x bins` network input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    data: Vec<f32>,
    n_channels: usize,
    n_frames: usize,
    n_bins: usize,
    roles: Vec<ChannelRole>,
}

impl FeatureTensor {
    pub fn new(
        data: Vec<f32>,
        n_channels: usize,
        n_frames: usize,
        n_bins: usize,
        roles: Vec<ChannelRole>,
    ) -> Result<Self> {
        ensure!(
            data.len() == n_channels * n_frames * n_bins,
            Shape,
            "{} values for dims {n_channels}x{n_frames}x{n_bins}",
            data.len()
        );
        ensure!(
            roles.len() == n_channels,
            Shape,
            "{} channel roles for {n_channels} channels",
            roles.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            NonFinite,
            "feature tensor contains non-finite values"
        );
        Ok(Self {
            data,
            n_channels,
            n_frames,
            n_bins,
            roles,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_channels, self.n_frames, self.n_bins)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn roles(&self) -> &[ChannelRole] {
        &self.roles
    }

    pub fn map(&self, c: usize) -> &[f32] {
        let n = self.n_frames * self.n_bins;
        &self.data[c * n..(c + 1) * n]
    }

    /// Copies frames `[start, start + len)` of every channel into `out`.
    pub fn copy_frames_into(&self, start: usize, len: usize, out: &mut Vec<f32>) {
        for c in 0..self.n_channels {
            let map = self.map(c);
            out.extend_from_slice(&map[start * self.n_bins..(start + len) * self.n_bins]);
        }
    }
}

/// Channel order for `n_mics`: log-mels by mic, then all pairs `(i, j)` with `i < j`.
pub fn channel_layout(n_mics: usize) -> Vec<ChannelRole> {
    let mut roles: Vec<ChannelRole> = (0..n_mics).map(|mic| ChannelRole::LogMel { mic }).collect();
    for i in 0..n_mics {
        for j in i + 1..n_mics {
            roles.push(ChannelRole::Gcc { i, j });
        }
    }
    roles
}

/// Stacks log-mel maps (one per mic, ascending) and GCC maps (pair order of
/// [`channel_layout`]) into one tensor. Every map must be `frames x bins`.
pub fn stack_features(
    logmels: &[Vec<f32>],
    gccs: &[Vec<f32>],
    n_bins: usize,
) -> Result<FeatureTensor> {
    ensure!(
        !logmels.is_empty(),
        InvalidArgument,
        "need at least one log-mel map"
    );
    ensure!(n_bins > 0, InvalidArgument, "bin count must be positive");
    let cell = logmels[0].len();
    ensure!(
        cell % n_bins == 0 && cell > 0,
        Shape,
        "log-mel map of {cell} values is not a multiple of {n_bins} bins"
    );
    let n_frames = cell / n_bins;
    for (k, m) in logmels.iter().chain(gccs).enumerate() {
        ensure!(
            m.len() == cell,
            Shape,
            "map {k} has {} values, expected {n_frames}x{n_bins}",
            m.len()
        );
    }

    let n_mics = logmels.len();
    let n_pairs = n_mics * (n_mics - 1) / 2;
    ensure!(
        gccs.is_empty() || gccs.len() == n_pairs,
        Shape,
        "{} gcc maps for {n_mics} mics (expected 0 or {n_pairs})",
        gccs.len()
    );
    let mut roles = channel_layout(n_mics);
    if gccs.is_empty() {
        roles.truncate(n_mics);
    }

    let mut data = Vec::with_capacity((logmels.len() + gccs.len()) * cell);
    for m in logmels.iter().chain(gccs) {
        data.extend_from_slice(m);
    }
    FeatureTensor::new(data, roles.len(), n_frames, n_bins, roles)
}

/// Extraction parameters for the log-mel + GCC-PHAT stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub n_lags: usize,
    pub include_gcc: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 32000,
            fft_size: 1024,
            hop: 320,
            n_mels: 64,
            fmin: 50.0,
            fmax: 14000.0,
            n_lags: 64,
            include_gcc: true,
        }
    }
}

impl FeatureConfig {
    /// Stable short hash of the parameters, used as a cache key component.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }
}

/// Full feature pipeline for one multichannel clip.
pub fn extract_features(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureTensor> {
    ensure!(
        w.sample_rate() == cfg.sample_rate,
        UnsupportedAudio,
        "sample rate {} Hz, expected {} Hz (resampling is not supported)",
        w.sample_rate(),
        cfg.sample_rate
    );
    ensure!(
        !cfg.include_gcc || cfg.n_lags == cfg.n_mels,
        InvalidArgument,
        "gcc lag count {} must equal mel band count {} to stack",
        cfg.n_lags,
        cfg.n_mels
    );
    let spec = stft(w, cfg.fft_size, cfg.hop)?;
    let fb = MelFilterbank::new(
        cfg.n_mels,
        cfg.fft_size,
        cfg.sample_rate,
        cfg.fmin,
        cfg.fmax,
    )?;
    let logmels = log_mel(&spec, &fb)?;
    let mut gccs = Vec::new();
    if cfg.include_gcc {
        for role in channel_layout(w.n_channels()) {
            if let ChannelRole::Gcc { i, j } = role {
                gccs.push(gcc_phat(&spec, i, j, cfg.n_lags)?);
            }
        }
    }
    stack_features(&logmels, &gccs, cfg.n_mels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stacks_ten_channels_in_pair_order() {
        let lm = vec![vec![0.0; 200 * 64]; 4];
        let gc = vec![vec![1.0; 200 * 64]; 6];
        let f = stack_features(&lm, &gc, 64).unwrap();
        assert_eq!(f.dims(), (10, 200, 64));
        let pairs: Vec<(usize, usize)> = f
            .roles()
            .iter()
            .filter_map(|r| match *r {
                ChannelRole::Gcc { i, j } => Some((i, j)),
                _ => None,
            })
            .collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        assert_eq!(f.map(3)[0], 0.0);
        assert_eq!(f.map(4)[0], 1.0);
    }

    #[test]
    fn mono_without_gcc_is_allowed() {
        let f = stack_features(&[vec![0.5; 30 * 64]], &[], 64).unwrap();
        assert_eq!(f.dims(), (1, 30, 64));
        assert_eq!(f.roles(), &[ChannelRole::LogMel { mic: 0 }]);
    }

    #[test]
    fn mismatched_frames_rejected() {
        let lm = vec![vec![0.0; 200 * 64], vec![0.0; 199 * 64]];
        assert!(stack_features(&lm, &[], 64).is_err());
        let lm = vec![vec![0.0; 200 * 64]; 2];
        assert!(stack_features(&lm, &[vec![0.0; 201 * 64]], 64).is_err());
    }

    #[test]
    fn extraction_is_deterministic_and_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let chans: Vec<Vec<f32>> = (0..4)
            .map(|_| (0..64000).map(|_| rng.gen_range(-0.1..0.1)).collect())
            .collect();
        let w = Waveform::new(chans, 32000).unwrap();
        let cfg = FeatureConfig::default();
        let a = extract_features(&w, &cfg).unwrap();
        let b = extract_features(&w, &cfg).unwrap();
        assert_eq!(a.dims(), (10, 200, 64));
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rejects_wrong_sample_rate() {
        let w = Waveform::silence(4, 48000, 48000).unwrap();
        let err = extract_features(&w, &FeatureConfig::default()).unwrap_err();
        assert!(err.to_string().contains("48000"));
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let a = FeatureConfig::default();
        let b = FeatureConfig {
            n_mels: 32,
            n_lags: 32,
            ..FeatureConfig::default()
        };
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), FeatureConfig::default().fingerprint());
    }
}
