//! Feature extraction: STFT, log-mel spectrograms, GCC-PHAT, and the stacked
//! `channels x frames x bins` network input.
//!
//! Every function here is a pure function of its arguments.

mod features;
mod gcc;
mod mel;
mod stft;
mod waveform;

pub use features::{
    channel_layout, extract_features, stack_features, ChannelRole, FeatureConfig, FeatureTensor,
};
pub use gcc::{gcc_phat, max_lag_samples, min_lag_count, SPEED_OF_SOUND, WHITEN_EPS};
pub use mel::{hz_to_mel, log_mel, mel_to_hz, MelFilterbank, LOG_FLOOR};
pub use stft::{hann_window, stft, ComplexSpectrogram};
pub use waveform::Waveform;
