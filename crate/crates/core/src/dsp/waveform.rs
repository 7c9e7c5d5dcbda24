use crate::error::{ensure, Result};

/// Multichannel time-domain audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f32>>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self> {
        ensure!(
            sample_rate > 0,
            InvalidArgument,
            "sample rate must be positive"
        );
        ensure!(
            !channels.is_empty(),
            InvalidArgument,
            "waveform has no channels"
        );
        let len = channels[0].len();
        ensure!(len > 0, InvalidArgument, "waveform is empty");
        ensure!(
            channels.iter().all(|c| c.len() == len),
            Shape,
            "channels have unequal lengths"
        );
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    /// All-zero waveform.
    pub fn silence(n_channels: usize, len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![vec![0.0; len]; n_channels], sample_rate)
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f32>> {
        self.channels
    }

    /// Multiplies every sample by `gain`.
    pub fn scaled(&self, gain: f32) -> Self {
        Self {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|&x| x * gain).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Mean power over all channels and samples.
    pub fn mean_power(&self) -> f64 {
        let total: f64 = self
            .channels
            .iter()
            .flat_map(|c| c.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum();
        total / (self.n_channels() * self.len()) as f64
    }
}
