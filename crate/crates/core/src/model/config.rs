use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};

/// Temporal and spectral reduction of the four pooling stages.
pub const POOL_FACTOR: usize = 16;

/// Architecture and decision settings shared by all branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeldConfig {
    pub n_classes: usize,
    pub conv_channels: Vec<usize>,
    pub use_gru: bool,
    pub input_channels: usize,
    pub n_mels: usize,
    pub sed_threshold: f64,
    pub joint_loss_weight: f64,
}

impl SeldConfig {
    /// Full-width network: channels 64, 128, 256, 512.
    pub fn full(n_classes: usize, input_channels: usize) -> Self {
        Self {
            n_classes,
            conv_channels: vec![64, 128, 256, 512],
            use_gru: true,
            input_channels,
            n_mels: 64,
            sed_threshold: 0.5,
            joint_loss_weight: 1.0,
        }
    }

    /// Narrow network for CPU runs: channels 16, 32, 64, 128.
    pub fn desk(n_classes: usize, input_channels: usize) -> Self {
        Self {
            conv_channels: vec![16, 32, 64, 128],
            ..Self::full(n_classes, input_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_classes >= 1,
            InvalidArgument,
            "need at least one class"
        );
        ensure!(
            self.input_channels >= 1,
            InvalidArgument,
            "need at least one input channel"
        );
        ensure!(
            self.conv_channels.len() == 4,
            InvalidArgument,
            "expected 4 conv groups, got {}",
            self.conv_channels.len()
        );
        ensure!(
            self.conv_channels.iter().all(|&c| c > 0),
            InvalidArgument,
            "conv channel counts must be positive"
        );
        ensure!(
            !self.use_gru || self.c_out() % 2 == 0,
            InvalidArgument,
            "last conv width {} must be even to split across GRU directions",
            self.c_out()
        );
        ensure!(
            self.n_mels >= POOL_FACTOR && self.n_mels % POOL_FACTOR == 0,
            InvalidArgument,
            "n_mels {} must be a positive multiple of {POOL_FACTOR}",
            self.n_mels
        );
        ensure!(
            (0.0..=1.0).contains(&self.sed_threshold),
            InvalidArgument,
            "SED threshold {} outside [0, 1]",
            self.sed_threshold
        );
        ensure!(
            self.joint_loss_weight >= 0.0 && self.joint_loss_weight.is_finite(),
            InvalidArgument,
            "joint loss weight must be non-negative, got {}",
            self.joint_loss_weight
        );
        Ok(())
    }

    pub fn c_out(&self) -> usize {
        *self.conv_channels.last().expect("validated length")
    }

    /// Hash of the fields that determine parameter shapes.
    pub fn fingerprint(&self) -> String {
        let arch = (
            self.n_classes,
            &self.conv_channels,
            self.use_gru,
            self.input_channels,
            self.n_mels,
        );
        let json = serde_json::to_vec(&arch).expect("tuple serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of the fields that determine the feature layers alone.
    pub fn feature_fingerprint(&self) -> String {
        let json = serde_json::to_vec(&(&self.conv_channels, self.input_channels, self.n_mels))
            .expect("tuple serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
