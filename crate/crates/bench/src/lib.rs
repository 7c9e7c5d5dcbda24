//! Deterministic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seld::autodiff::Tensor;
use seld::dsp::{FeatureConfig, Waveform};
use seld::metrics::ClipEval;

pub const SAMPLE_RATE: u32 = 32000;

/// `channels` channels of uniform noise.
pub fn noise(channels: usize, seconds: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let data = (0..channels)
        .map(|_| (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect())
        .collect();
    Waveform::new(data, SAMPLE_RATE).expect("non-empty")
}

pub fn features(n_mels: usize) -> FeatureConfig {
    FeatureConfig {
        sample_rate: SAMPLE_RATE,
        n_mels,
        n_lags: n_mels,
        ..FeatureConfig::default()
    }
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random scores against sparse random references.
pub fn clip_evals(clips: usize, frames: usize, classes: usize, seed: u64) -> Vec<ClipEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..clips)
        .map(|k| {
            let cells = frames * classes;
            let scores: Vec<f32> = (0..cells).map(|_| rng.gen()).collect();
            let ref_act: Vec<bool> = (0..cells).map(|_| rng.gen_bool(0.2)).collect();
            let angle = |rng: &mut ChaCha8Rng| [rng.gen_range(-3.1..3.1), rng.gen_range(-0.7..0.7)];
            let pred_doa = (0..cells).flat_map(|_| angle(&mut rng)).collect();
            let ref_doa = (0..cells).flat_map(|_| angle(&mut rng)).collect();
            ClipEval {
                id: format!("clip{k}"),
                n_classes: classes,
                pred_act: scores.iter().map(|&s| s >= 0.5).collect(),
                scores,
                pred_doa,
                ref_act,
                ref_doa,
            }
        })
        .collect()
}
