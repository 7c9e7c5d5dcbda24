//! Resolved configurations: built-in defaults, then flags, then an optional JSON file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use seld::dsp::{channel_layout, FeatureConfig};
use seld::model::SeldConfig;
use seld::spatial::{SceneGenerator, DEFAULT_D_MAX};
use seld::training::{AudioFormat, TrainConfig};
use seld::{Error, Result};

use crate::args::{FormatArg, PresetArg, RegimeArg};

pub const SAMPLE_RATE: u32 = 32000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub clips: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Largest microphone spacing of the tetrahedral array, metres.
    pub d_max: f64,
    pub generator: SceneGenerator,
}

impl SynthConfig {
    pub fn default_with(
        clips: usize,
        duration: f64,
        classes: usize,
        seed: u64,
        snr: f64,
        val_fraction: f64,
    ) -> Self {
        Self {
            clips,
            seed,
            val_fraction,
            d_max: DEFAULT_D_MAX,
            generator: SceneGenerator {
                n_classes: classes,
                duration,
                noise_snr_db: snr,
                ..SceneGenerator::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 {
            return Err(Error::InvalidArgument(
                "at least one clip is required".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if !(self.generator.duration > 0.0) {
            return Err(Error::InvalidArgument(
                "clip duration must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a run needs; snapshotted as `runs/<id>/config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub format: AudioFormat,
    pub features: FeatureConfig,
    pub model: SeldConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Checks that the feature stack, the network input and the dataset agree.
    pub fn validate(&self, n_mics: usize) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        let f = &self.features;
        if self.model.n_mels != f.n_mels {
            return Err(Error::InvalidArgument(format!(
                "model expects {} bins but features have {} mel bands",
                self.model.n_mels, f.n_mels
            )));
        }
        let maps = if f.include_gcc {
            channel_layout(n_mics).len()
        } else {
            n_mics
        };
        if self.model.input_channels != maps {
            return Err(Error::InvalidArgument(format!(
                "model expects {} input maps, the {}-channel features give {maps}",
                self.model.input_channels, n_mics
            )));
        }
        Ok(())
    }

    /// Default run id, `<regime>-<format>-s<seed>`.
    pub fn default_run_id(&self) -> String {
        format!(
            "{}-{}-s{}",
            self.train.regime,
            self.format.as_str(),
            self.train.seed
        )
    }
}

pub fn format_of(f: FormatArg) -> AudioFormat {
    match f {
        FormatArg::Foa => AudioFormat::Foa,
        FormatArg::Mic => AudioFormat::Mic,
    }
}

pub fn regime_of(r: RegimeArg) -> seld::training::Regime {
    use seld::training::Regime;
    match r {
        RegimeArg::Sed => Regime::Sed,
        RegimeArg::DoaTransfer => Regime::DoaTransfer,
        RegimeArg::DoaNt => Regime::DoaNt,
        RegimeArg::Joint => Regime::Joint,
        RegimeArg::TwoStage => Regime::TwoStage,
    }
}

pub fn preset_model(p: PresetArg, n_classes: usize, input_channels: usize) -> SeldConfig {
    match p {
        PresetArg::Desk => SeldConfig::desk(n_classes, input_channels),
        PresetArg::Full => SeldConfig::full(n_classes, input_channels),
    }
}

/// Feature settings with `n_mels` mel bands and as many GCC lags.
pub fn features_with(n_mels: usize) -> FeatureConfig {
    FeatureConfig {
        sample_rate: SAMPLE_RATE,
        n_mels,
        n_lags: n_mels,
        ..FeatureConfig::default()
    }
}

/// Recursively overlays `over` onto `base`; objects merge, anything else replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies a JSON override file to a resolved value. Unknown keys are rejected.
pub fn with_file<T: Serialize + DeserializeOwned>(resolved: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else {
        return Ok(resolved);
    };
    let text = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::InvalidArgument(format!("cannot read {}: {e}", path.display())),
    })?;
    let over: Value = serde_json::from_slice(&text)?;
    let mut base = serde_json::to_value(&resolved)?;
    merge(&mut base, over);
    serde_json::from_value(base)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

/// Prints the resolved configuration to stdout.
pub fn echo<T: Serialize>(what: &str, cfg: &T) -> Result<()> {
    println!(
        "{what} configuration:\n{}",
        serde_json::to_string_pretty(cfg)?
    );
    Ok(())
}
