#![allow(dead_code)]

use seld::dsp::{extract_features, FeatureConfig};
use seld::model::SeldConfig;
use seld::spatial::{derive_seed, synthesize_scene, MicArrayGeometry, SceneGenerator, SceneSpec};
use seld::training::{AudioFormat, ClipData};

pub fn geometry() -> MicArrayGeometry {
    MicArrayGeometry::tetrahedral(0.0482)
}

/// 16 mel bands, 16 GCC lags.
pub fn small_features() -> FeatureConfig {
    FeatureConfig {
        n_mels: 16,
        n_lags: 16,
        ..FeatureConfig::default()
    }
}

pub fn tiny_model(n_classes: usize) -> SeldConfig {
    SeldConfig {
        conv_channels: vec![4, 4, 8, 8],
        n_mels: 16,
        ..SeldConfig::desk(n_classes, 10)
    }
}

pub fn clip_from_spec(
    id: &str,
    spec: &SceneSpec,
    n_classes: usize,
    feat: &FeatureConfig,
    format: AudioFormat,
) -> ClipData {
    let scene = synthesize_scene(spec, &geometry(), feat.sample_rate, n_classes).unwrap();
    let w = match format {
        AudioFormat::Foa => &scene.foa,
        AudioFormat::Mic => &scene.mic,
    };
    ClipData::new(id, extract_features(w, feat).unwrap(), scene.labels).unwrap()
}

/// `n` generated clips of `duration` seconds, seeds derived from `master`.
pub fn synthetic_clips(
    n: usize,
    n_classes: usize,
    duration: f64,
    master: u64,
    feat: &FeatureConfig,
) -> Vec<ClipData> {
    let gen = SceneGenerator {
        n_classes,
        duration,
        ..SceneGenerator::default()
    };
    (0..n)
        .map(|k| {
            let spec = gen.generate(derive_seed(master, k as u64)).unwrap();
            clip_from_spec(
                &format!("clip{k:03}"),
                &spec,
                n_classes,
                feat,
                AudioFormat::Foa,
            )
        })
        .collect()
}
